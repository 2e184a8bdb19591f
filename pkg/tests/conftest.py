import numpy as np
import pytest
from hypothesis import settings

from macrl.model import ModelConfig

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    """2-block, dim-32 model on 8x8 images: small enough for finite differences."""
    return ModelConfig(image_size=8, patch_size=4, channels=3, enc_depth=2, enc_heads=4, enc_dim=32,
                       dec_dim=16, dec_heads=1, proj_dim=16, num_classes=3)


@pytest.fixture
def desk_cfg():
    return ModelConfig(image_size=16, patch_size=4, channels=3, enc_depth=2, enc_heads=4, enc_dim=64,
                       dec_dim=32, dec_heads=1, proj_dim=64, num_classes=2)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
