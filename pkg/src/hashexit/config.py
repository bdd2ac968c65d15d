"""Run configuration: one flat key = value text file drives every command.

All randomness flows from the single `seed` through named substreams (data,
init, sampling, policy), so components can be re-seeded independently and a
persisted config re-runs to identical outputs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig, PRESETS
from .errors import ConfigError
from .evaluation import CostModel
from .losses import LossWeights
from .numerics import LrSchedule
from .synth import SyntheticSpec

_STREAMS = {"data": 0, "init": 1, "sampling": 2, "policy": 3, "flips": 4}


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent, named generator derived from the run seed."""
    try:
        stream_id = _STREAMS[name]
    except KeyError:
        raise ConfigError(f"unknown random substream {name!r}") from None
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream_id]))


def flip_view_stream(seed: int, checkpoint_index: int) -> np.random.Generator:
    """Generator for one checkpoint's jittered flip-recording view.

    Keyed by checkpoint index rather than training-loop state so an offline
    replay of saved snapshots reproduces the recorded histories exactly.
    """
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), _STREAMS["flips"], int(checkpoint_index)])
    )


@dataclass
class RunConfig:
    # run identity
    seed: int = 7
    # encoder
    preset: str = "toy"            # toy | paper-dims
    code_len: int = 32             # stage-1 code bits; stages get [c, c, 4c, 8c]
    # encoder training (defaults follow the reference protocol: 16x4 PK
    # batches, 100 epochs, step-decayed learning rate)
    epochs: int = 100
    checkpoint_interval: int = 10
    batch_p: int = 16
    batch_k: int = 4
    lr_values: tuple = (3e-4, 3e-5, 3e-6)
    lr_boundaries: tuple = (0, 40, 70)
    weight_decay: float = 0.0
    train_jitter: float = 0.4  # std of Gaussian noise on training batches
    lambda_triplet: float = 0.35
    lambda_classifier: float = 1.0
    lambda_ranking: float = 100.0
    margin: float = 0.2
    ranking_normalize: bool = True
    # exit policy
    policy: str = "ets+gs"         # never | random | qs | gs | ets | ets+gs
    tau_qs: float = -1.0           # fraction of code length; < 0 means uncalibrated
    tau_gs: float = -1.0
    gs_distinct_identity: bool = True
    random_p: float = 0.5
    ets_hidden: int = 64
    ets_epochs: int = 120
    ets_lr: float = 0.05
    ets_batch: int = 16
    # cost / budgets
    cost_fractions: tuple = (0.20, 0.20, 0.30, 0.30)
    budgets: tuple = (0.2, 0.3, 0.4, 0.5, 0.75, 1.0)
    same_camera_filter: bool = False
    # data
    data_source: str = "synthetic"  # synthetic | files
    files_dir: str = ""             # HRC1/HRE1 directory when data_source=files
    data_identities: int = 16
    data_samples_per_identity: int = 10
    data_query_per_identity: int = 5
    data_gallery_per_identity: int = 3
    sigma_between: float = 1.0
    sigma_within: float = 0.4
    frac_hard: float = 0.25
    frac_impossible: float = 0.05

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        if self.data_source not in ("synthetic", "files"):
            raise ConfigError(f"unknown data source {self.data_source!r}")

    # -- derived component configs ------------------------------------------

    def encoder_config(self) -> EncoderConfig:
        return PRESETS[self.preset](base_code_len=self.code_len)

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lambda_triplet=self.lambda_triplet,
            lambda_classifier=self.lambda_classifier,
            lambda_ranking=self.lambda_ranking,
            margin=self.margin,
            ranking_normalize=self.ranking_normalize,
        )

    def lr_schedule(self) -> LrSchedule:
        return LrSchedule(
            values=tuple(float(v) for v in self.lr_values),
            boundaries=tuple(int(b) for b in self.lr_boundaries),
        )

    def cost_model(self) -> CostModel:
        return CostModel(fractions=tuple(float(f) for f in self.cost_fractions))

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            n_identities=self.data_identities,
            samples_per_identity=self.data_samples_per_identity,
            query_per_identity=self.data_query_per_identity,
            gallery_per_identity=self.data_gallery_per_identity,
            sigma_between=self.sigma_between,
            sigma_within=self.sigma_within,
            frac_hard=self.frac_hard,
            frac_impossible=self.frac_impossible,
        )

    def substream(self, name: str) -> np.random.Generator:
        return substream(self.seed, name)

    # -- text round trip -------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        defaults = cls()
        values: dict[str, object] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            values[key] = _parse_value(value, getattr(defaults, key), key)
        return cls(**values)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def with_overrides(self, **kwargs) -> "RunConfig":
        kwargs = {k: v for k, v in kwargs.items() if v is not None}
        return replace(self, **kwargs)


def _parse_value(text: str, default, key: str):
    try:
        if isinstance(default, bool):
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            if not text:
                return ()
            parts = [p.strip() for p in text.split(",")]
            if default and isinstance(default[0], int) and all("." not in p and "e" not in p.lower() for p in parts):
                return tuple(int(p) for p in parts)
            return tuple(float(p) for p in parts)
        return text
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: cannot parse {text!r}") from exc
