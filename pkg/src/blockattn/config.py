"""Run configuration: flat key=value files with command-line overrides.

One file, one namespace.  Every key is a bare name (``d_e=32``), lines
starting with ``#`` (or anything after `` #`` on a value line) are comments.
The same names appear as CLI flags; precedence is defaults < file < flags.
"""

from __future__ import annotations

from dataclasses import dataclass

from .encoder import EncoderConfig
from .serialize import coerce_scalar
from .tasks import TaskSpec

VARIANTS = ("full", "none-mask", "s2t-only")

OPTIMIZERS = ("adadelta", "adam")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 64
    optimizer: str = "adadelta"
    gamma: float = 1e-4
    eval_every: int = 50
    variant: str = "full"

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")


@dataclass(frozen=True)
class RunConfig:
    seed: int
    out: str
    task: TaskSpec
    encoder: EncoderConfig
    train: TrainConfig


# flat key -> (section, constructor field).  "batch" feeds both the training
# loop and the encoder's batched block-length bound; "mu"/"sigma" likewise
# describe the task lengths the encoder will see.
_KEYS = {
    "seed": ("run", "seed"),
    "out": ("run", "out"),
    "task": ("task", "kind"),
    "vocab": ("task", "vocab"),
    "mu": ("task", "mu"),
    "sigma": ("task", "sigma"),
    "classes": ("task", "classes"),
    "train_size": ("task", "train_size"),
    "val_size": ("task", "val_size"),
    "d_e": ("encoder", "d_e"),
    "d_h": ("encoder", "d_h"),
    "r": ("encoder", "r"),
    "keep_prob": ("encoder", "keep_prob"),
    "c": ("encoder", "c"),
    "activation": ("encoder", "activation"),
    "steps": ("train", "steps"),
    "batch": ("train", "batch_size"),
    "optimizer": ("train", "optimizer"),
    "gamma": ("train", "gamma"),
    "eval_every": ("train", "eval_every"),
    "variant": ("train", "variant"),
}

_DEFAULTS = {"seed": 0, "out": "runs/latest", "d_e": 32, "d_h": 32}


def parse_config_text(text: str) -> dict:
    """Flat key=value lines -> {key: coerced value}; rejects unknown keys."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _KEYS:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        values[key] = coerce_scalar(val)
    return values


def load_config_file(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def build_run_config(values: dict) -> RunConfig:
    """Assemble the typed config from a flat mapping of known keys."""
    for key in values:
        if key not in _KEYS:
            raise ValueError(f"unknown config key {key!r}")
    merged = dict(_DEFAULTS)
    merged.update({k: v for k, v in values.items() if v is not None})

    def section(name):
        return {field: merged[key] for key, (sec, field) in _KEYS.items()
                if sec == name and key in merged}

    task = TaskSpec(**section("task"))
    train = TrainConfig(**section("train"))
    encoder = EncoderConfig(
        batch_size=train.batch_size,
        mu=task.mu,
        sigma=task.sigma,
        **section("encoder"),
    )
    return RunConfig(seed=int(merged["seed"]), out=str(merged["out"]),
                     task=task, encoder=encoder, train=train)


def run_config_flat(cfg: RunConfig) -> dict:
    """Inverse of :func:`build_run_config` for checkpoint headers."""
    out = {}
    for key, (sec, field) in _KEYS.items():
        source = {"run": cfg, "task": cfg.task,
                  "encoder": cfg.encoder, "train": cfg.train}[sec]
        out[key] = getattr(source, field)
    return out
