"""Flat run configuration: one dataclass, one key=value file format.

A config file holds `key = value` lines (the '=' may be unpadded),
full-line or trailing '#' comments, and nothing else. Unknown keys are
rejected rather than ignored so a typo cannot silently fall back to a
default. `render_config` writes the canonical echo, one line per field
in declaration order; parse(render(c)) == c, which is what checkpoints
store and the determinism checks compare.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import ParseError, UsageError

WALL_CLOCK_MODES = ("zero", "real")


@dataclass(frozen=True)
class TrainConfig:
    """Every knob of a training run; field order is the file order."""

    # task and data
    task: str = "copy"
    vocab_size: int = 12
    min_len: int = 3
    max_len: int = 8
    noise: float = 0.1
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200
    source_dim: int = 8  # cont_label vector width
    # model and augmenter dimensions
    hidden: int = 20
    embed: int = 10
    aug_hidden: int = 16
    aug_embed: int = 8
    model_max_len: int = 12  # decoder rollout cap
    rollout_slack: int = 4  # augmenter cap: prototype length + slack
    # optimization
    eta: float = 0.05
    anneal_factor: float = 0.8
    anneal_every_epochs: int = 3
    batch_size: int = 32
    pretrain_epochs: int = 30
    patience: int = 5
    aug_pretrain_epochs: int = 5
    aug_eta: float = 0.5  # self-reconstruction step size (backtracked)
    train_epochs: int = 10
    # distribution matching
    n_samples: int = 50
    alt_augmenter: int = 1  # augmenter steps per alternation cycle
    alt_model: int = 1  # model steps per alternation cycle
    entropy_weight: float = 1.0
    fidelity: bool = True
    # baselines
    tau: float = 0.8
    raml_candidates: int = 4
    rl_slack: int = 4
    baseline_decay: float = 0.9
    # evaluation and bookkeeping
    beam: int = 4
    seed: int = 0
    wall_clock: str = "zero"  # "real" stamps wall_seconds; "zero" keeps CSVs
    # reproducible

    def __post_init__(self) -> None:
        if not (self.eta > 0.0 and np.isfinite(self.eta)):
            raise UsageError("eta must be positive and finite")
        if not (0.0 < self.anneal_factor <= 1.0):
            raise UsageError("anneal_factor must be in (0, 1]")
        if self.anneal_every_epochs < 1:
            raise UsageError("anneal_every_epochs must be >= 1")
        if self.n_samples < 2:
            raise UsageError("n_samples must be >= 2")
        if self.beam < 1:
            raise UsageError("beam must be >= 1")
        if self.alt_augmenter < 0 or self.alt_model < 0:
            raise UsageError("alternation counts must be >= 0")
        if self.alt_augmenter + self.alt_model < 1:
            raise UsageError("alternation needs at least one step per cycle")
        if min(self.pretrain_epochs, self.train_epochs, self.patience,
               self.aug_pretrain_epochs) < 0:
            raise UsageError("epoch and patience counts must be >= 0")
        if not (self.aug_eta > 0.0 and np.isfinite(self.aug_eta)):
            raise UsageError("aug_eta must be positive and finite")
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        if self.entropy_weight < 0.0:
            raise UsageError("entropy_weight must be >= 0")
        if self.wall_clock not in WALL_CLOCK_MODES:
            raise UsageError(f"wall_clock must be one of {WALL_CLOCK_MODES}")
        if self.model_max_len < self.max_len:
            raise UsageError("model_max_len must cover the task max_len")

    def lr_at(self, epoch: int) -> float:
        """Learning rate after `epoch` completed epochs, decayed in plateaus."""
        return self.eta * self.anneal_factor ** (epoch // self.anneal_every_epochs)


def _field_types() -> dict:
    # `from __future__ import annotations` stringifies the types
    named = {"int": int, "float": float, "str": str, "bool": bool}
    return {f.name: named[f.type] for f in fields(TrainConfig)}


def _coerce(key: str, text: str, kind, lineno: int):
    if kind is bool:
        if text not in ("true", "false"):
            raise ParseError(
                f"line {lineno}: {key} expects true or false, got {text!r}"
            )
        return text == "true"
    try:
        return kind(text)
    except ValueError:
        raise ParseError(
            f"line {lineno}: {key} expects {kind.__name__}, got {text!r}"
        ) from None


def parse_config(text: str, overrides: dict | None = None) -> TrainConfig:
    """TrainConfig from key=value text; `overrides` wins over the file."""
    types = _field_types()
    values: dict = {}
    where: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in types:
            raise ParseError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ParseError(
                f"line {lineno}: duplicate key {key!r} (first on line "
                f"{where[key]})"
            )
        values[key] = _coerce(key, value, types[key], lineno)
        where[key] = lineno
    try:
        config = TrainConfig(**values)
    except UsageError as exc:
        raise ParseError(str(exc)) from None
    if overrides:
        config = replace(config, **overrides)
    return config


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as err:
        raise UsageError(f"cannot read config {path}: {err}") from err
    return parse_config(text, overrides)


def render_config(config: TrainConfig) -> str:
    """Canonical echo, parse_config's fixed point."""
    lines = []
    for f in fields(TrainConfig):
        value = getattr(config, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
