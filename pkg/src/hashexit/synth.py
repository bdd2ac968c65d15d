"""Planted-difficulty synthetic dataset generator.

Stands in for person imagery at desk scale. Each identity's prototype map
carries two signal components that together sum to `sigma_between` power:

  * distinct per-band means (constant within each of the four horizontal
    bands), which part pooling reads out directly; and
  * a fine spatial pattern whose per-band mean is removed, so it is invisible
    to band averaging but extractable by the deeper stages' learned mixing.

Samples are prototypes plus isotropic noise. "Hard" samples are near-midpoint
blends of two identity prototypes (tilted slightly toward the labeled
identity so the label stays recoverable at full compute), and "impossible"
samples are pure noise, uncorrelated with their label. The planted difficulty
of every sample is recorded so evaluations can compare against ground truth.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError

DIFFICULTY = ("easy", "hard", "impossible")
N_BANDS = 4
# share of identity-signal std carried by the coarse band component
BAND_FRACTION = 0.45
# hard-sample blend weight toward the labeled identity, drawn per sample; an
# exact 0.5 blend would make the planted label unrecoverable at any depth,
# while the upper end stays confusable at coarse resolution only
HARD_BLEND_RANGE = (0.52, 0.68)


@dataclass(frozen=True)
class SyntheticSpec:
    n_identities: int = 16
    samples_per_identity: int = 10
    query_per_identity: int = 5
    gallery_per_identity: int = 3
    height: int = 32
    width: int = 16
    channels: int = 3
    sigma_between: float = 1.0
    sigma_within: float = 0.4
    frac_hard: float = 0.25
    frac_impossible: float = 0.05

    def __post_init__(self):
        if self.n_identities < 2:
            raise ConfigError("need at least two identities")
        if self.height % N_BANDS:
            raise ConfigError(f"height must divide by {N_BANDS}")
        for frac in (self.frac_hard, self.frac_impossible):
            if not 0.0 <= frac <= 1.0:
                raise ConfigError("difficulty fractions must lie in [0, 1]")
        if self.frac_hard + self.frac_impossible > 1.0:
            raise ConfigError("difficulty fractions exceed 1")


@dataclass
class SplitData:
    maps: np.ndarray        # (n, H, W, C) float64
    ids: np.ndarray         # (n,) uint32
    cams: np.ndarray        # (n,) uint32
    difficulty: np.ndarray  # (n,) int8 index into DIFFICULTY

    def __len__(self) -> int:
        return self.maps.shape[0]


@dataclass
class Dataset:
    spec: SyntheticSpec
    train: SplitData
    query: SplitData
    gallery: SplitData


def _prototypes(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Per-identity maps: band means plus a zero-band-mean fine pattern."""
    sigma_band = spec.sigma_between * BAND_FRACTION
    sigma_pattern = spec.sigma_between * float(np.sqrt(1.0 - BAND_FRACTION**2))
    shape = (spec.n_identities, spec.height, spec.width, spec.channels)
    band_means = rng.normal(
        0.0, sigma_band, size=(spec.n_identities, N_BANDS, spec.channels)
    )
    rows = np.repeat(band_means, spec.height // N_BANDS, axis=1)  # (ids, H, C)
    base = np.broadcast_to(rows[:, :, None, :], shape).copy()
    pattern = rng.normal(0.0, sigma_pattern, size=shape)
    banded = pattern.reshape(
        spec.n_identities, N_BANDS, spec.height // N_BANDS, spec.width, spec.channels
    )
    banded -= banded.mean(axis=(2, 3), keepdims=True)
    return base + pattern


def _difficulty_assignment(n: int, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Exact counts from the fractions, shuffled over sample slots."""
    n_imp = int(round(spec.frac_impossible * n))
    n_hard = int(round(spec.frac_hard * n))
    codes = np.concatenate(
        [
            np.full(n_imp, DIFFICULTY.index("impossible"), dtype=np.int8),
            np.full(n_hard, DIFFICULTY.index("hard"), dtype=np.int8),
            np.zeros(n - n_imp - n_hard, dtype=np.int8),
        ]
    )
    return rng.permutation(codes)


def _gen_split(
    spec: SyntheticSpec,
    prototypes: np.ndarray,
    per_identity: int,
    rng: np.random.Generator,
    planted: bool,
    cam_offset: int = 0,
) -> SplitData:
    n = spec.n_identities * per_identity
    ids = np.repeat(np.arange(spec.n_identities, dtype=np.uint32), per_identity)
    difficulty = (
        _difficulty_assignment(n, spec, rng) if planted else np.zeros(n, dtype=np.int8)
    )
    maps = np.empty((n, spec.height, spec.width, spec.channels))
    for i in range(n):
        ident = int(ids[i])
        kind = DIFFICULTY[difficulty[i]]
        noise = rng.normal(0.0, spec.sigma_within, size=prototypes.shape[1:])
        if kind == "easy":
            maps[i] = prototypes[ident] + noise
        elif kind == "hard":
            partner = int(rng.choice([j for j in range(spec.n_identities) if j != ident]))
            w = rng.uniform(*HARD_BLEND_RANGE)
            maps[i] = w * prototypes[ident] + (1.0 - w) * prototypes[partner] + noise
        else:  # impossible: content carries no identity signal
            maps[i] = rng.normal(0.0, spec.sigma_between, size=prototypes.shape[1:])
    cams = ((np.arange(n) + cam_offset) % 2).astype(np.uint32)
    return SplitData(maps=maps, ids=ids, cams=cams, difficulty=difficulty)


def generate(spec: SyntheticSpec, rng: np.random.Generator) -> Dataset:
    """Draw prototypes and the three splits; the gallery stays clean (easy)
    so it serves as a reliable reference set."""
    protos = _prototypes(spec, rng)
    train = _gen_split(spec, protos, spec.samples_per_identity, rng, planted=True)
    query = _gen_split(spec, protos, spec.query_per_identity, rng, planted=True, cam_offset=1)
    gallery = _gen_split(spec, protos, spec.gallery_per_identity, rng, planted=False)
    return Dataset(spec=spec, train=train, query=query, gallery=gallery)


SPLITS = ("train", "query", "gallery")
_ARRAYS = ("maps", "ids", "cams", "difficulty")


def save_dataset(directory: str | os.PathLike, ds: Dataset) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        data: SplitData = getattr(ds, split)
        for name in _ARRAYS:
            np.save(directory / f"{split}_{name}.npy", getattr(data, name))
    lines = [f"{k} {v}" for k, v in asdict(ds.spec).items()]
    for split in SPLITS:
        data = getattr(ds, split)
        counts = np.bincount(data.difficulty, minlength=len(DIFFICULTY))
        lines.append(
            f"{split}_counts " + ",".join(str(int(c)) for c in counts)
        )
    (directory / "dataset_meta.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(directory: str | os.PathLike) -> Dataset:
    directory = Path(directory)
    meta = {}
    for line in (directory / "dataset_meta.txt").read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, value = line.split(" ", 1)
            meta[key] = value
    spec = SyntheticSpec(
        n_identities=int(meta["n_identities"]),
        samples_per_identity=int(meta["samples_per_identity"]),
        query_per_identity=int(meta["query_per_identity"]),
        gallery_per_identity=int(meta["gallery_per_identity"]),
        height=int(meta["height"]),
        width=int(meta["width"]),
        channels=int(meta["channels"]),
        sigma_between=float(meta["sigma_between"]),
        sigma_within=float(meta["sigma_within"]),
        frac_hard=float(meta["frac_hard"]),
        frac_impossible=float(meta["frac_impossible"]),
    )
    splits = {}
    for split in SPLITS:
        arrays = {
            name: np.load(directory / f"{split}_{name}.npy") for name in _ARRAYS
        }
        splits[split] = SplitData(**arrays)
    return Dataset(spec=spec, **splits)
