"""Command-line entry point: ``macrl {pretrain,finetune,linprobe,attn-viz}``.

Configuration is a flat ``key = value`` text file (``#`` starts a comment).
Keys are TrainConfig and ModelConfig field names plus the data keys of
DataConfig; ``--set key=value`` and ``--seed`` override the file. Exit codes:
0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import typing
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from . import train as TR
from .checkpoint import CheckpointError, load_checkpoint
from .model import ConfigError, ModelConfig
from .tensor import NonFiniteError
from .train import TrainConfig, TrainingDiverged
from .viz import attn_viz

log = logging.getLogger("macrl")

SUBCOMMANDS = ("pretrain", "finetune", "linprobe", "attn-viz")
SYNTH = "synth"


@dataclass(frozen=True)
class DataConfig:
    """Where images come from when ``--data synth`` is used, and how test data is split off."""

    synth_n: int = 512
    synth_test_n: int = 256
    synth_noise: float = 0.3
    synth_seed: int = 0
    test_fraction: float = 0.2


@dataclass(frozen=True)
class RunRequest:
    subcommand: str
    config_path: str | None
    dataset_path: str | None
    checkpoint_in: str | None
    output_dir: str | None
    seed: int | None = None
    overrides: tuple[tuple[str, str], ...] = ()
    num_images: int = 8

    @property
    def checkpoint_out(self) -> str | None:
        return None if self.output_dir is None else os.path.join(self.output_dir, "final.ckpt")


@dataclass(frozen=True)
class Settings:
    train: TrainConfig
    model: ModelConfig
    data: DataConfig = field(default_factory=DataConfig)


class UsageError(Exception):
    pass


# --- config text ---------------------------------------------------------------------------

_SECTIONS = (("train", TrainConfig), ("model", ModelConfig), ("data", DataConfig))


def _field_types() -> dict[str, tuple[str, type]]:
    out = {}
    for section, cls in _SECTIONS:
        hints = typing.get_type_hints(cls)
        for f in dataclasses.fields(cls):
            out[f.name] = (section, hints[f.name])
    return out


FIELDS = _field_types()


def parse_value(key: str, text: str, typ):
    text = text.strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typing.get_origin(typ) is tuple:
            parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
            args = typing.get_args(typ)
            if len(parts) != len(args):
                raise ValueError(text)
            return tuple(a(p.strip()) for a, p in zip(args, parts))
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {getattr(typ, '__name__', typ)}") from None


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw ``key -> value`` strings; unknown keys are rejected by name."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        check_key(key)
        out[key] = value
    return out


def check_key(key: str) -> None:
    if key not in FIELDS:
        raise ConfigError(f"unknown config key {key!r}")


def build_settings(stage: str, raw: dict[str, str]) -> Settings:
    """Typed, validated configs for ``stage`` from raw strings; stage defaults fill the rest."""
    values: dict[str, dict] = {"train": {}, "model": {}, "data": {}}
    for key, text in raw.items():
        check_key(key)
        section, typ = FIELDS[key]
        values[section][key] = parse_value(key, text, typ)
    given_stage = values["train"].pop("stage", stage)
    if given_stage != stage:
        raise ConfigError(f"stage: config says {given_stage!r} but the subcommand is {stage!r}")
    train = TrainConfig.for_stage(stage, **values["train"])
    return Settings(train, ModelConfig(**values["model"]), DataConfig(**values["data"]))


def render_settings(s: Settings) -> str:
    lines = ["# effective configuration"]
    for section, obj in (("train", s.train), ("model", s.model), ("data", s.data)):
        lines.append(f"# {section}")
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def load_settings(req: RunRequest) -> Settings:
    stage = "linprobe" if req.subcommand == "attn-viz" else req.subcommand
    raw: dict[str, str] = {}
    if req.config_path is not None:
        try:
            with open(req.config_path) as f:
                raw.update(parse_config_text(f.read(), req.config_path))
        except FileNotFoundError:
            raise UsageError(f"config file not found: {req.config_path}") from None
    for key, value in req.overrides:
        check_key(key)
        raw[key] = value
    if req.seed is not None:
        raw["seed"] = str(req.seed)
    return build_settings(stage, raw)


# --- data -------------------------------------------------------------------------------------

def load_data(path: str, settings: Settings) -> tuple[D.Dataset, D.Dataset]:
    """(train, test) datasets at the model's image size."""
    mc, dc = settings.model, settings.data
    if path == SYNTH:
        train = D.synth_dataset(dc.synth_n, mc.image_size, np.random.default_rng([dc.synth_seed, 0]),
                                dc.synth_noise, mc.channels)
        test = D.synth_dataset(dc.synth_test_n, mc.image_size, np.random.default_rng([dc.synth_seed, 1]),
                               dc.synth_noise, mc.channels)
        return train, test
    if os.path.isdir(path):
        train, test = D.load_cifar_dir(path, mc.num_classes)
    elif os.path.isfile(path):
        train, test = D.load_cifar_binary(path, mc.num_classes), None
    else:
        raise UsageError(f"data path not found: {path}")
    if test is None:
        cut = len(train) - int(round(len(train) * dc.test_fraction))
        train, test = train.subset(slice(0, cut)), train.subset(slice(cut, None))
    resized = [D.Dataset(D.eval_batch(ds.images, mc.image_size), ds.labels) for ds in (train, test)]
    return resized[0], resized[1]


# --- subcommands ---------------------------------------------------------------------------------

def _write_effective(req: RunRequest, settings: Settings) -> None:
    os.makedirs(req.output_dir, exist_ok=True)
    with open(os.path.join(req.output_dir, "effective.cfg"), "w") as f:
        f.write(render_settings(settings))


def _checkpoint(req: RunRequest):
    if not req.checkpoint_in:
        raise UsageError(f"{req.subcommand} requires --ckpt")
    if not os.path.isfile(req.checkpoint_in):
        raise UsageError(f"checkpoint not found: {req.checkpoint_in}")
    return load_checkpoint(req.checkpoint_in)


def execute(req: RunRequest) -> int:
    if req.subcommand in ("finetune", "linprobe", "attn-viz"):
        ckpt = _checkpoint(req)
    settings = load_settings(req)
    if req.subcommand != "pretrain":
        settings = dataclasses.replace(settings, model=ckpt.model_config)
    if not req.dataset_path:
        raise UsageError(f"{req.subcommand} requires --data")
    if not req.output_dir:
        raise UsageError(f"{req.subcommand} requires --out")
    train, test = load_data(req.dataset_path, settings)
    _write_effective(req, settings)

    if req.subcommand == "pretrain":
        res = TR.pretrain(settings.train, settings.model, train, out_dir=req.output_dir)
        last = res.history[-1] if res.history else {}
        print(f"pretrained {res.checkpoint.step} steps; final total loss {last.get('total_loss', float('nan')):.4f}")
    elif req.subcommand in ("finetune", "linprobe"):
        run = TR.finetune if req.subcommand == "finetune" else TR.linear_probe
        res = run(settings.train, ckpt, train, test, out_dir=req.output_dir)
        if res.dropped_groups:
            print(f"dropped parameter groups: {', '.join(res.dropped_groups)}")
        print(f"{req.subcommand} test accuracy {res.accuracies[-1]:.4f}")
    else:
        paths = attn_viz(ckpt, train.images[:req.num_images], req.output_dir)
        print(f"wrote {len(paths)} images to {req.output_dir}")
    return 0


# --- argv ------------------------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _override(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="macrl", description=__doc__.split("\n", 1)[0])
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--data", help="CIFAR .bin directory, a single .bin file, or 'synth'")
        p.add_argument("--ckpt", help="input checkpoint" + ("" if name == "pretrain" else " (required)"))
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="override the training seed")
        p.add_argument("--set", dest="overrides", action="append", default=[], type=_override,
                       metavar="KEY=VALUE", help="override one config key (repeatable)")
        if name == "attn-viz":
            p.add_argument("--num-images", type=int, default=8)
    return parser


def parse_args(argv) -> RunRequest:
    ns = build_parser().parse_args(argv)
    return RunRequest(ns.subcommand, ns.config, ns.data, ns.ckpt, ns.out, ns.seed,
                   tuple(ns.overrides), getattr(ns, "num_images", 8))


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        return execute(parse_args(argv))
    except (UsageError, ConfigError) as e:
        print(f"macrl: error: {e}", file=sys.stderr)
        return 1
    except (TrainingDiverged, NonFiniteError, CheckpointError, OSError) as e:
        print(f"macrl: failed: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"macrl: failed: {e}", file=sys.stderr)
        return 2


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    return run(argv)


if __name__ == "__main__":
    sys.exit(main())
