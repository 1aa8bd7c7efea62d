"""Plain-text run configuration.

One ``key = value`` per line; ``#`` starts a comment. Lists are comma
separated and a schedule is written ``0:1e-3, 150:3e-4``. Unknown keys and
repeated keys are errors, reported with their line number.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional

from .losses import LossWeights
from .networks import Dims
from .train import TrainConfig, paper_preset


class ConfigParseError(ValueError):
    def __init__(self, message: str, line: int = 0, source: str = "<config>"):
        where = f"{source}:{line}: " if line else f"{source}: "
        super().__init__(where + message)
        self.line = line


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: Optional[str] = None
    out_dir: str = "run"
    epsilon: float = 1e-5


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _int_list(s: str) -> tuple:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _schedule(s: str) -> tuple:
    out = []
    for item in s.split(","):
        epoch, sep, rate = item.partition(":")
        if not sep:
            raise ValueError(f"schedule entry {item.strip()!r} is not epoch:rate")
        out.append((int(epoch), float(rate)))
    return tuple(out)


# key -> (parser, setter)
def _weights(name):
    return lambda rc, v: setattr(rc.train.weights, name, v)


def _dims(name):
    return lambda rc, v: setattr(rc.train.dims, name, v)


def _train(name):
    return lambda rc, v: setattr(rc.train, name, v)


KEYS: Dict[str, tuple] = {
    "dataset": (str, lambda rc, v: setattr(rc, "dataset", v)),
    "out_dir": (str, lambda rc, v: setattr(rc, "out_dir", v)),
    "epsilon": (float, lambda rc, v: setattr(rc, "epsilon", v)),
    "alpha": (float, _weights("alpha")),
    "beta": (float, _weights("beta")),
    "gamma": (float, _weights("gamma")),
    "H": (int, _dims("H")),
    "W": (int, _dims("W")),
    "L": (int, _dims("L")),
    "m": (int, _dims("m")),
    "N": (int, _dims("N")),
    "encoder_hidden": (_int_list, _dims("encoder_hidden")),
    "generator_hidden": (_int_list, _dims("generator_hidden")),
    "epochs": (int, _train("epochs")),
    "warmup_epochs": (int, _train("warmup_epochs")),
    "batch_size": (int, _train("batch_size")),
    "lr_schedule": (_schedule, _train("lr_schedule")),
    "seed": (int, _train("seed")),
    "kappa": (float, _train("kappa")),
    "fixed_codebook": (_bool, _train("fixed_codebook")),
    "learnable_classifier": (_bool, _train("learnable_classifier")),
    "log_recon": (_bool, _train("log_recon")),
    "checkpoint_every": (int, _train("checkpoint_every")),
}

PRESETS: Dict[str, Callable[[], TrainConfig]] = {"desk": TrainConfig, "paper": paper_preset}


def parse_config(text: str, source: str = "<config>", preset: Optional[str] = None) -> RunConfig:
    """Parse a run configuration; ``preset`` (or a ``preset`` line) sets the base values."""
    entries = []
    seen: Dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigParseError(f"expected 'key = value', got {raw.strip()!r}", lineno, source)
        if key != "preset" and key not in KEYS:
            raise ConfigParseError(f"unknown key {key!r}", lineno, source)
        if key in seen:
            raise ConfigParseError(f"key {key!r} already set on line {seen[key]}", lineno, source)
        seen[key] = lineno
        entries.append((lineno, key, value))

    base = preset
    for lineno, key, value in entries:
        if key == "preset":
            if preset is not None and value != preset:
                raise ConfigParseError(f"preset {value!r} conflicts with requested {preset!r}",
                                       lineno, source)
            base = value
            if base not in PRESETS:
                raise ConfigParseError(f"unknown preset {value!r}", lineno, source)
    if base is not None and base not in PRESETS:
        raise ConfigParseError(f"unknown preset {base!r}", 0, source)
    rc = RunConfig(train=PRESETS[base or "desk"]())
    rc.train.weights = LossWeights(rc.train.weights.alpha, rc.train.weights.beta,
                                   rc.train.weights.gamma)
    rc.train.dims = Dims.from_dict(rc.train.dims.to_dict())

    for lineno, key, value in entries:
        if key == "preset":
            continue
        parser, setter = KEYS[key]
        try:
            setter(rc, parser(value))
        except ValueError as e:
            raise ConfigParseError(f"bad value for {key!r}: {e}", lineno, source) from None
    try:
        LossWeights(rc.train.weights.alpha, rc.train.weights.beta, rc.train.weights.gamma)
        rc.train.validate()
    except ValueError as e:
        raise ConfigParseError(str(e), 0, source) from None
    return rc


def load_config(path, preset: Optional[str] = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text(), source=str(path), preset=preset)


def dump_config(rc: RunConfig) -> str:
    """Inverse of ``parse_config`` for every key."""
    t, d, w = rc.train, rc.train.dims, rc.train.weights
    lines = []
    if rc.dataset is not None:
        lines.append(f"dataset = {rc.dataset}")
    lines += [
        f"out_dir = {rc.out_dir}",
        f"epsilon = {rc.epsilon!r}",
        f"alpha = {w.alpha!r}", f"beta = {w.beta!r}", f"gamma = {w.gamma!r}",
        f"H = {d.H}", f"W = {d.W}", f"L = {d.L}", f"m = {d.m}", f"N = {d.N}",
        "encoder_hidden = " + ", ".join(map(str, d.encoder_hidden)),
        "generator_hidden = " + ", ".join(map(str, d.generator_hidden)),
        f"epochs = {t.epochs}", f"warmup_epochs = {t.warmup_epochs}",
        f"batch_size = {t.batch_size}",
        "lr_schedule = " + ", ".join(f"{e}:{r!r}" for e, r in t.lr_schedule),
        f"seed = {t.seed}", f"kappa = {t.kappa!r}",
        f"fixed_codebook = {str(t.fixed_codebook).lower()}",
        f"learnable_classifier = {str(t.learnable_classifier).lower()}",
        f"log_recon = {str(t.log_recon).lower()}",
        f"checkpoint_every = {t.checkpoint_every}",
    ]
    return "\n".join(lines) + "\n"
