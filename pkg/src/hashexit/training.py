"""Experiment orchestration: the training loop, flip collection, policy
fitting/calibration, and run-directory artifact management.

A run directory is self-describing: the persisted config plus the artifacts
below reproduce every report the tool emits.

    run/
      config.txt               resolved configuration (thresholds filled in
                               by train-policy)
      data/                    synthetic dataset arrays + metadata
      checkpoints/             encoder snapshots at flip checkpoints + final
      flips.txt                per-sample correctness sequences
      metrics_train.jsonl      one JSON record per epoch
      policy/                  trained exit-classifier checkpoint
      codes/                   HRC1/HRE1 encodings per split
      reports/                 CSV/DAT reports + decision log
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evaluation, hamming, policy as policy_mod
from .config import RunConfig, flip_view_stream
from .encoder import MultiExitEncoder
from .errors import DependencyError, PolicyError
from .losses import PKBatchSampler, combined_loss
from .numerics import SGD, load_checkpoint, restore_params, save_checkpoint
from .policy import (
    EtsClassifier,
    FlipRecorder,
    PolicyState,
    QueryContext,
    build_sequences,
    calibrate_gs_threshold,
    calibrate_qs_threshold,
    label_from_flips,
    read_flip_histories,
    train_ets,
    write_flip_histories,
)
from .synth import Dataset, generate, load_dataset, save_dataset


@dataclass
class RunPaths:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def config(self) -> Path:
        return self.root / "config.txt"

    @property
    def data_dir(self) -> Path:
        return self.root / "data"

    @property
    def checkpoints_dir(self) -> Path:
        return self.root / "checkpoints"

    @property
    def codes_dir(self) -> Path:
        return self.root / "codes"

    @property
    def reports_dir(self) -> Path:
        return self.root / "reports"

    @property
    def flips(self) -> Path:
        return self.root / "flips.txt"

    @property
    def metrics_log(self) -> Path:
        return self.root / "metrics_train.jsonl"

    def encoder_prefix(self, tag: str) -> str:
        return str(self.checkpoints_dir / f"encoder_{tag}")

    @property
    def ets_prefix(self) -> str:
        return str(self.root / "policy" / "ets")

    def codes_file(self, split: str, stage: int) -> Path:
        return self.codes_dir / f"{split}_s{stage}.hrc1"

    def features_file(self, split: str) -> Path:
        return self.codes_dir / f"{split}_s1.hre1"

    def require(self, path: Path | str, producer: str) -> Path:
        path = Path(path)
        probe = path if path.suffix else Path(str(path) + ".manifest")
        if not probe.exists():
            raise DependencyError(
                f"missing artifact {probe}; run `hashexit {producer}` first"
            )
        return path


def prepare_dataset(cfg: RunConfig, paths: RunPaths) -> Dataset:
    """Generate the synthetic dataset from the data substream and persist it.

    Regeneration is deterministic, so rerunning overwrites with identical
    bytes.
    """
    ds = generate(cfg.synthetic_spec(), cfg.substream("data"))
    save_dataset(paths.data_dir, ds)
    return ds


def load_run_dataset(paths: RunPaths) -> Dataset:
    paths.require(paths.data_dir / "dataset_meta.txt", "train")
    return load_dataset(paths.data_dir)


def _class_indices(ids: np.ndarray) -> tuple[np.ndarray, int]:
    classes, indices = np.unique(ids, return_inverse=True)
    return indices.astype(np.int64), int(classes.size)


def build_encoder(cfg: RunConfig, n_classes: int) -> MultiExitEncoder:
    return MultiExitEncoder(cfg.encoder_config(), n_classes, cfg.substream("init"))


def _flip_view(cfg: RunConfig, maps: np.ndarray, checkpoint_index: int) -> np.ndarray:
    """The training split as seen when recording one flip checkpoint.

    Flip statistics sample the decisions the model makes on the *training
    stream*, so the view carries the same noise magnitude training batches do;
    the draw is keyed by checkpoint index, which lets an offline replay of
    saved snapshots reproduce the histories bit-for-bit.
    """
    if cfg.train_jitter <= 0:
        return maps
    rng = flip_view_stream(cfg.seed, checkpoint_index)
    return maps + rng.normal(0.0, cfg.train_jitter, size=maps.shape)


def train_encoder(cfg: RunConfig, dataset: Dataset, paths: RunPaths) -> MultiExitEncoder:
    """Train the multi-exit encoder, snapshotting and recording flip
    statistics every `checkpoint_interval` epochs."""
    paths.checkpoints_dir.mkdir(parents=True, exist_ok=True)
    labels, n_classes = _class_indices(dataset.train.ids)
    encoder = build_encoder(cfg, n_classes)
    sampling_rng = cfg.substream("sampling")
    sampler = PKBatchSampler(labels, cfg.batch_p, cfg.batch_k, sampling_rng)
    schedule = cfg.lr_schedule()
    weights = cfg.loss_weights()
    opt = SGD(encoder.trainable_params(), weight_decay=cfg.weight_decay)
    recorder = FlipRecorder(range(len(dataset.train)))
    maps = dataset.train.maps
    checkpoint_index = 0

    with open(paths.metrics_log, "w", encoding="utf-8") as log:
        for epoch in range(cfg.epochs):
            lr = schedule.lr_for_epoch(epoch)
            epoch_total = 0.0
            term_sums: dict[int, dict[str, float]] = {}
            n_batches = 0
            for idx in sampler.epoch_batches():
                batch = maps[idx]
                if cfg.train_jitter > 0:
                    batch = batch + sampling_rng.normal(
                        0.0, cfg.train_jitter, size=batch.shape
                    )
                exits, _ = encoder.forward_all(batch, mode="train")
                loss, breakdown = combined_loss(exits, labels[idx], weights)
                opt.zero_grad()
                loss.backward()
                opt.step(lr)
                epoch_total += float(loss.data)
                n_batches += 1
                for stage, terms in breakdown.items():
                    acc = term_sums.setdefault(stage, {k: 0.0 for k in terms})
                    for k, v in terms.items():
                        acc[k] += v
            record = {
                "epoch": epoch,
                "lr": lr,
                "loss": epoch_total / max(n_batches, 1),
                "terms": {
                    str(stage): {k: v / max(n_batches, 1) for k, v in terms.items()}
                    for stage, terms in sorted(term_sums.items())
                },
            }
            log.write(json.dumps(record, sort_keys=True) + "\n")

            if (epoch + 1) % cfg.checkpoint_interval == 0:
                tag = f"epoch_{epoch + 1:03d}"
                save_checkpoint(
                    paths.encoder_prefix(tag),
                    encoder.named_params(),
                    meta={"seed": cfg.seed, "epoch": epoch + 1, "n_classes": n_classes},
                )
                codes, _ = encoder.encode(_flip_view(cfg, maps, checkpoint_index))
                recorder.record(codes[3], dataset.train.ids)
                checkpoint_index += 1

    save_checkpoint(
        paths.encoder_prefix("final"),
        encoder.named_params(),
        meta={"seed": cfg.seed, "epoch": cfg.epochs, "n_classes": n_classes},
    )
    write_flip_histories(paths.flips, [h for h, _ in recorder.labeled()])
    return encoder


def load_encoder(cfg: RunConfig, paths: RunPaths, tag: str = "final") -> MultiExitEncoder:
    prefix = paths.require(paths.encoder_prefix(tag), "train")
    params, meta = load_checkpoint(str(prefix))
    encoder = build_encoder(cfg, int(meta["n_classes"]))
    restore_params(encoder.named_params(), params)
    return encoder


def replay_flips(cfg: RunConfig, dataset: Dataset, paths: RunPaths) -> list:
    """Recompute flip histories by replaying saved encoder snapshots.

    Produces the same histories (and file bytes) as the inline recording in
    train_encoder.
    """
    snapshots = sorted(paths.checkpoints_dir.glob("encoder_epoch_*.manifest"))
    if not snapshots:
        raise DependencyError(
            f"no encoder snapshots under {paths.checkpoints_dir}; run `hashexit train` first"
        )
    recorder = FlipRecorder(range(len(dataset.train)))
    for checkpoint_index, manifest in enumerate(snapshots):
        tag = manifest.name[len("encoder_") : -len(".manifest")]
        encoder = load_encoder(cfg, paths, tag=tag)
        codes, _ = encoder.encode(_flip_view(cfg, dataset.train.maps, checkpoint_index))
        recorder.record(codes[3], dataset.train.ids)
    return [h for h, _ in recorder.labeled()]


def encode_split(encoder: MultiExitEncoder, maps: np.ndarray):
    """Per-stage packed codes plus float32 part-pooled stage-1 features."""
    return encoder.encode(maps)


def build_index(codes, ids, cams, s1_features=None) -> hamming.GalleryIndex:
    return hamming.GalleryIndex(
        codes={c.stage: c for c in codes},
        ids=ids,
        cams=cams,
        s1_features=s1_features,
    )


def write_split_codes(paths: RunPaths, split: str, codes, s1_features, ids, cams) -> None:
    paths.codes_dir.mkdir(parents=True, exist_ok=True)
    for c in codes:
        hamming.write_codes_file(paths.codes_file(split, c.stage), c, ids, cams)
    hamming.write_embeddings_file(paths.features_file(split), s1_features)


def read_split_codes(paths: RunPaths, split: str, producer: str = "encode-gallery"):
    codes = []
    ids = cams = None
    for stage in range(1, 5):
        f = paths.require(paths.codes_file(split, stage), producer)
        c, ids, cams = hamming.read_codes_file(f)
        codes.append(c)
    s1 = hamming.read_embeddings_file(paths.require(paths.features_file(split), producer))
    return codes, s1, ids, cams


def _loo_stage1_stats(codes_s1: hamming.PackedCodes, index: hamming.GalleryIndex, distinct_identity: bool):
    """Leave-one-out stage-1 top-1 distance, GS margin and correctness for
    every sample of the split the index was built from."""
    n = len(codes_s1)
    dists = np.zeros(n, dtype=np.int64)
    margins = np.zeros(n, dtype=np.int64)
    correct = np.zeros(n, dtype=bool)
    for i in range(n):
        ranking = hamming.full_ranking(codes_s1[i], index, stage=1, skip_position=i)
        dists[i] = ranking.distances[0]
        correct[i] = ranking.ids[0] == index.ids[i]
        if distinct_identity:
            others = np.flatnonzero(ranking.ids != ranking.ids[0])
            margins[i] = (
                ranking.distances[others[0]] - ranking.distances[0]
                if others.size
                else -1
            )
        else:
            margins[i] = (
                ranking.distances[1] - ranking.distances[0] if n > 1 else -1
            )
    return dists, margins, correct


def train_exit_policy(
    cfg: RunConfig, dataset: Dataset, encoder: MultiExitEncoder, paths: RunPaths
) -> tuple[EtsClassifier, RunConfig]:
    """Fit the recurrent difficulty classifier on flip labels and calibrate
    the QS/GS thresholds, all on the training split (leave-one-out).

    Returns the classifier and the config updated with calibrated thresholds;
    the updated config is persisted to the run directory.
    """
    paths.require(paths.flips, "train")
    histories = read_flip_histories(paths.flips)
    codes, s1 = encode_split(encoder, dataset.train.maps)
    index = build_index(codes, dataset.train.ids, dataset.train.cams, s1)

    sequences = build_sequences(s1, codes[0], index, leave_one_out=True)
    sample_ids = np.array([h.sample_id for h in histories])
    labels = np.array(
        [policy_mod.LABEL_TO_INT[label_from_flips(h)] for h in histories], dtype=np.int64
    )

    rng = cfg.substream("policy")
    ets = EtsClassifier(
        input_dim=sequences.shape[2], hidden=cfg.ets_hidden, rng=rng
    )
    train_ets(
        ets,
        sequences[sample_ids],
        labels,
        epochs=cfg.ets_epochs,
        lr=cfg.ets_lr,
        batch_size=cfg.ets_batch,
        rng=rng,
    )
    Path(paths.ets_prefix).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(
        paths.ets_prefix,
        ets.named_params(),
        meta={
            "input_dim": sequences.shape[2],
            "hidden": cfg.ets_hidden,
            "n_layers": ets.n_layers,
            "seed": cfg.seed,
        },
    )

    dists, margins, correct = _loo_stage1_stats(codes[0], index, cfg.gs_distinct_identity)
    length = codes[0].length
    tau_qs = calibrate_qs_threshold(dists, correct) / length
    tau_gs = calibrate_gs_threshold(margins, correct) / length
    updated = cfg.with_overrides(tau_qs=float(tau_qs), tau_gs=float(tau_gs))
    updated.save(paths.config)
    return ets, updated


def load_ets(paths: RunPaths) -> EtsClassifier:
    prefix = paths.require(paths.ets_prefix, "train-policy")
    params, meta = load_checkpoint(str(prefix))
    ets = EtsClassifier(
        input_dim=int(meta["input_dim"]),
        hidden=int(meta["hidden"]),
        n_layers=int(meta["n_layers"]),
    )
    restore_params(ets.named_params(), params)
    return ets


def load_policy_state(cfg: RunConfig, paths: RunPaths) -> PolicyState:
    kind = cfg.policy
    state = PolicyState(
        kind=kind,
        gs_distinct_identity=cfg.gs_distinct_identity,
        random_p=cfg.random_p,
    )
    if kind in ("qs",):
        if cfg.tau_qs < 0:
            raise PolicyError("tau_qs not calibrated; run `hashexit train-policy`")
        state.tau_qs = cfg.tau_qs
    if kind in ("gs", "ets+gs"):
        if cfg.tau_gs < 0:
            raise PolicyError("tau_gs not calibrated; run `hashexit train-policy`")
        state.tau_gs = cfg.tau_gs
    if kind in ("ets", "ets+gs"):
        state.ets = load_ets(paths)
    return state


def make_query_contexts(codes, s1_features, query_ids) -> list[QueryContext]:
    n = len(codes[0])
    return [
        QueryContext(
            query_id=int(query_ids[i]),
            stage_codes=[c[i] for c in codes],
            s1_feature=s1_features[i],
        )
        for i in range(n)
    ]
