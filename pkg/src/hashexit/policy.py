"""Exit decisions: flip-statistics labeling, the recurrent difficulty
classifier, separability heuristics, and their composition.

Training-time correctness is tracked per sample across checkpoints; the flip
count of that boolean sequence labels the sample easy (<= 2 flips), hard
(> 2, <= 6) or skip (> 6, or never correct at all). A two-layer gated
recurrent classifier then learns to predict that label at query time from the
part-pooled stage-1 feature of the query and its top-4 stage-1 retrievals.

All stage-1 feature handling is float32: persisted embedding files are f32,
and keeping the in-memory path identical makes file and in-memory pipelines
bit-equal.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import hamming
from .autodiff import Tensor
from .errors import PolicyError, RetrievalError
from .losses import classifier_nll
from .numerics import SGD, init_linear, LayerParams

LABELS = ("easy", "skip", "hard")
LABEL_TO_INT = {name: i for i, name in enumerate(LABELS)}
EASY_MAX_FLIPS = 2
HARD_MAX_FLIPS = 6
SEQ_LEN = 5  # query + top-4 retrievals


@dataclass
class FlipHistory:
    """Top-1 correctness of one training sample across checkpoints."""

    sample_id: int
    checks: list[bool] = field(default_factory=list)

    @property
    def flips(self) -> int:
        return sum(a != b for a, b in zip(self.checks, self.checks[1:]))


def label_from_flips(history: FlipHistory) -> str:
    """easy / skip / hard from the flip count (strict inequalities).

    A stable-but-never-correct sample earns skip rather than easy: spending
    more compute on it is wasted either way.
    """
    if len(history.checks) < 2:
        raise PolicyError("flip labeling needs at least two checkpoints")
    flips = history.flips
    if flips > HARD_MAX_FLIPS:
        return "skip"
    if flips > EASY_MAX_FLIPS:
        return "hard"
    if not any(history.checks):
        return "skip"
    return "easy"


def leave_one_out_correct(
    codes: hamming.PackedCodes, ids: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Top-1 correctness of every sample queried against the rest of its split.

    Returns (correct, evaluable); identities occurring once have no positive
    and are marked not evaluable (a warning is emitted once).
    """
    ids = np.asarray(ids)
    n = len(codes)
    if n < 2:
        raise RetrievalError("leave-one-out needs at least two samples")
    _, inverse, counts = np.unique(ids, return_inverse=True, return_counts=True)
    evaluable = counts[inverse] >= 2
    if not evaluable.all():
        warnings.warn(
            f"{int((~evaluable).sum())} samples belong to single-sample "
            "identities and are excluded from flip statistics",
            stacklevel=2,
        )
    dists = hamming.popcount(
        codes.words[:, None, :] ^ codes.words[None, :, :]
    ).sum(axis=2)
    np.fill_diagonal(dists, np.iinfo(np.int64).max)
    top1 = dists.argmin(axis=1)  # first minimum: ties break to lowest index
    correct = ids[top1] == ids
    return correct & evaluable, evaluable


class FlipRecorder:
    """Accumulates per-checkpoint correctness into FlipHistory objects."""

    def __init__(self, sample_ids: Sequence[int]):
        self.histories = [FlipHistory(int(s)) for s in sample_ids]
        self.evaluable: np.ndarray | None = None

    def record(self, stage4_codes: hamming.PackedCodes, ids: np.ndarray) -> None:
        correct, evaluable = leave_one_out_correct(stage4_codes, ids)
        self.evaluable = evaluable if self.evaluable is None else (self.evaluable & evaluable)
        for h, c in zip(self.histories, correct):
            h.checks.append(bool(c))

    def labeled(self) -> list[tuple[FlipHistory, str]]:
        out = []
        for i, h in enumerate(self.histories):
            if self.evaluable is not None and not self.evaluable[i]:
                continue
            out.append((h, label_from_flips(h)))
        return out


def write_flip_histories(path, histories: Iterable[FlipHistory]) -> None:
    """Text table: sample id and the 0/1 correctness sequence."""
    with open(path, "w", encoding="utf-8") as fh:
        for h in histories:
            bits = "".join("1" if c else "0" for c in h.checks)
            fh.write(f"{h.sample_id} {bits}\n")


def read_flip_histories(path) -> list[FlipHistory]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            sid, bits = line.split()
            out.append(FlipHistory(int(sid), [b == "1" for b in bits]))
    return out


# -- recurrent difficulty classifier ---------------------------------------------


class EtsClassifier:
    """Two stacked gated recurrent layers, ReLU head, 3-way linear classifier.

    Consumes sequences of exactly five vectors: the query's part-pooled
    stage-1 feature followed by those of its top-4 stage-1 retrievals.
    """

    def __init__(
        self,
        input_dim: int,
        hidden: int = 64,
        n_layers: int = 2,
        rng: np.random.Generator | None = None,
    ):
        rng = rng or np.random.default_rng(0)
        self.input_dim = input_dim
        self.hidden = hidden
        self.n_layers = n_layers
        self.layers: list[dict[str, Tensor]] = []
        d_in = input_dim
        for _ in range(n_layers):
            layer = {}
            for gate in ("update", "reset", "cand"):
                layer[f"w_{gate}"] = Tensor(
                    rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, hidden)),
                    requires_grad=True,
                )
                layer[f"u_{gate}"] = Tensor(
                    rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, hidden)),
                    requires_grad=True,
                )
                layer[f"b_{gate}"] = Tensor(np.zeros(hidden), requires_grad=True)
            self.layers.append(layer)
            d_in = hidden
        self.head: LayerParams = init_linear(rng, hidden, len(LABELS))

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers, start=1):
            for name, t in layer.items():
                out[f"gru{i}.{name}"] = t
        out["head.weights"] = self.head.weights
        out["head.bias"] = self.head.bias
        return out

    @staticmethod
    def cell(x: Tensor, h: Tensor, layer: dict[str, Tensor]) -> Tensor:
        """One gated update: h' = (1 - z) * h + z * cand."""
        z = (x @ layer["w_update"] + h @ layer["u_update"] + layer["b_update"]).sigmoid()
        r = (x @ layer["w_reset"] + h @ layer["u_reset"] + layer["b_reset"]).sigmoid()
        cand = (x @ layer["w_cand"] + (r * h) @ layer["u_cand"] + layer["b_cand"]).tanh()
        return (1.0 - z) * h + z * cand

    def forward(self, sequences) -> Tensor:
        """sequences: (B, 5, input_dim) -> logits (B, 3)."""
        seqs = sequences.data if isinstance(sequences, Tensor) else np.asarray(sequences)
        seqs = seqs.astype(np.float64)
        if seqs.ndim != 3 or seqs.shape[1] != SEQ_LEN or seqs.shape[2] != self.input_dim:
            raise PolicyError(
                f"expected (B, {SEQ_LEN}, {self.input_dim}) sequences, got {seqs.shape}"
            )
        b = seqs.shape[0]
        inputs = [Tensor(seqs[:, t, :]) for t in range(SEQ_LEN)]
        for layer in self.layers:
            h = Tensor(np.zeros((b, self.hidden)))
            outs = []
            for x in inputs:
                h = self.cell(x, h, layer)
                outs.append(h)
            inputs = outs
        final = inputs[-1].relu()
        return final @ self.head.weights + self.head.bias

    def predict(self, sequences: np.ndarray) -> np.ndarray:
        """Hard labels (ints into LABELS); argmax ties go to the lowest index."""
        logits = self.forward(sequences).data
        return logits.argmax(axis=1)


def train_ets(
    classifier: EtsClassifier,
    sequences: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    lr: float,
    batch_size: int = 16,
    rng: np.random.Generator | None = None,
) -> list[float]:
    """Cross-entropy training with inverse-frequency class balancing.

    Returns the per-epoch mean loss. Zero epochs leaves the classifier
    untouched. A class absent from the data triggers a warning; it can never
    be sampled and therefore never learned.
    """
    rng = rng or np.random.default_rng(0)
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    if n == 0:
        raise PolicyError("no labeled sequences to train on")
    counts = np.bincount(labels, minlength=len(LABELS))
    missing = [LABELS[i] for i in range(len(LABELS)) if counts[i] == 0]
    if missing:
        warnings.warn(
            f"classes absent from ETS training data: {missing}; they will "
            "never be predicted",
            stacklevel=2,
        )
    weights = 1.0 / counts[labels]
    weights = weights / weights.sum()
    opt = SGD(classifier.named_params())
    history = []
    iters = max(1, n // batch_size)
    for _ in range(epochs):
        epoch_loss = 0.0
        for _ in range(iters):
            batch = rng.choice(n, size=min(batch_size, n), replace=True, p=weights)
            logits = classifier.forward(sequences[batch])
            loss = classifier_nll(logits, labels[batch])
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            epoch_loss += float(loss.data)
        history.append(epoch_loss / iters)
    return history


def build_sequences(
    s1_features: np.ndarray,
    stage1_codes: hamming.PackedCodes,
    index: hamming.GalleryIndex,
    leave_one_out: bool = False,
) -> np.ndarray:
    """Assemble (N, 5, D) float32 sequences: each query's stage-1 feature
    followed by its top-4 stage-1 retrievals' features from the index."""
    if index.s1_features is None:
        raise PolicyError("gallery index carries no stage-1 features")
    feats = np.asarray(s1_features, dtype=np.float32)
    n = feats.shape[0]
    need = SEQ_LEN - 1
    out = np.empty((n, SEQ_LEN, feats.shape[1]), dtype=np.float32)
    for i in range(n):
        hits = hamming.topk(
            stage1_codes[i],
            index,
            k=need,
            stage=1,
            skip_position=i if leave_one_out else None,
        )
        if hits.positions.size < need:
            raise PolicyError(
                f"gallery too small for top-{need} retrieval sequences"
            )
        out[i, 0] = feats[i]
        out[i, 1:] = index.s1_features[hits.positions]
    return out


# -- separability heuristics --------------------------------------------------------


def qs_exit(
    query_code: hamming.HashCode,
    index: hamming.GalleryIndex,
    tau_qs: float,
    stage: int | None = None,
) -> bool:
    """Query separability: exit iff the top-1 Hamming distance is below tau."""
    hit = hamming.topk(query_code, index, k=1, stage=stage)
    return bool(hit.distances[0] < tau_qs)


def gs_margin(
    query_code: hamming.HashCode,
    index: hamming.GalleryIndex,
    stage: int | None = None,
    distinct_identity: bool = True,
) -> int | None:
    """Gap between the top-1 retrieval and its nearest competitor.

    With `distinct_identity` (default) the competitor is the best match whose
    identity differs from the top-1's; otherwise it is simply the second
    retrieval. Returns None when no competitor exists.
    """
    ranking = hamming.full_ranking(query_code, index, stage=stage)
    if not distinct_identity:
        if ranking.ids.size < 2:
            return None
        return int(ranking.distances[1] - ranking.distances[0])
    top_id = ranking.ids[0]
    others = np.flatnonzero(ranking.ids != top_id)
    if others.size == 0:
        return None
    return int(ranking.distances[others[0]] - ranking.distances[0])


def gs_exit(
    query_code: hamming.HashCode,
    index: hamming.GalleryIndex,
    tau_gs: float,
    stage: int | None = None,
    distinct_identity: bool = True,
) -> bool:
    """Gallery separability: exit iff the top-2 (different-identity) margin
    exceeds tau. A single-identity gallery never exits (warning)."""
    margin = gs_margin(query_code, index, stage=stage, distinct_identity=distinct_identity)
    if margin is None:
        warnings.warn("gallery has a single identity; GS never exits", stacklevel=2)
        return False
    return bool(margin > tau_gs)


def calibrate_qs_threshold(top1_dists: np.ndarray, correct: np.ndarray) -> int:
    """Pick integer tau maximizing (correct - incorrect) exits under d < tau.

    Ties prefer the smallest tau (most conservative exit set).
    """
    top1_dists = np.asarray(top1_dists)
    signed = np.where(np.asarray(correct, dtype=bool), 1, -1)
    candidates = [0] + sorted(int(d) + 1 for d in np.unique(top1_dists))
    scores = [int(signed[top1_dists < tau].sum()) for tau in candidates]
    return candidates[int(np.argmax(scores))]


def calibrate_gs_threshold(margins: np.ndarray, correct: np.ndarray) -> int:
    """Pick integer tau maximizing (correct - incorrect) exits under
    margin > tau. Ties prefer the largest tau (most conservative)."""
    margins = np.asarray(margins)
    signed = np.where(np.asarray(correct, dtype=bool), 1, -1)
    # tau = max never exits; tau = min - 1 exits everything
    candidates = sorted((int(m) for m in np.unique(margins)), reverse=True)
    candidates.append(int(margins.min()) - 1)
    scores = [int(signed[margins > tau].sum()) for tau in candidates]
    return candidates[int(np.argmax(scores))]


# -- policy composition ----------------------------------------------------------------


POLICY_KINDS = ("never", "random", "qs", "gs", "ets", "ets+gs")


@dataclass
class PolicyState:
    """Everything a policy needs at decision time.

    `tau_qs`/`tau_gs` are stored as fractions of the code length so one
    calibrated value transfers across stages with different code widths.
    """

    kind: str
    tau_qs: float | None = None
    tau_gs: float | None = None
    ets: EtsClassifier | None = None
    gs_distinct_identity: bool = True
    random_p: float = 0.5

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise PolicyError(f"unknown policy kind {self.kind!r}")


@dataclass
class QueryContext:
    """Per-query inputs a policy may consult (stage codes + stage-1 feature)."""

    query_id: int
    stage_codes: list[hamming.HashCode]
    s1_feature: np.ndarray


@dataclass(frozen=True)
class ExitDecision:
    query_id: int
    stage: int
    label: str
    top1_dists: dict[int, int]


def _top1_dist(ctx: QueryContext, index: hamming.GalleryIndex, stage: int) -> int:
    hit = hamming.topk(ctx.stage_codes[stage - 1], index, k=1, stage=stage)
    return int(hit.distances[0])


def decide_exit(
    policy: PolicyState,
    ctx: QueryContext,
    index: hamming.GalleryIndex,
    rng: np.random.Generator | None = None,
    budget_cap: int | None = None,
) -> ExitDecision:
    """Choose the exit stage for one query.

    random: stage 1 with probability p, else full compute. qs/gs: evaluate
    the heuristic at stages 1-3, exit on first trigger. ets: easy/skip exit
    at stage 1, hard runs to stage 4. ets+gs: easy/skip exit at stage 1, hard
    samples re-test gallery separability at stages 2-3. A budget cap clamps
    the chosen stage.
    """
    dists: dict[int, int] = {}
    label = policy.kind
    if policy.kind == "never":
        stage = 4
    elif policy.kind == "random":
        if rng is None:
            raise PolicyError("random policy needs a seeded generator")
        stage = 1 if rng.random() < policy.random_p else 4
    elif policy.kind in ("qs", "gs"):
        tau = policy.tau_qs if policy.kind == "qs" else policy.tau_gs
        if tau is None:
            raise PolicyError(f"{policy.kind} policy missing calibrated threshold")
        stage = 4
        for k in (1, 2, 3):
            length = ctx.stage_codes[k - 1].length
            dists[k] = _top1_dist(ctx, index, k)
            if policy.kind == "qs":
                fired = dists[k] < tau * length
            else:
                margin = gs_margin(
                    ctx.stage_codes[k - 1],
                    index,
                    stage=k,
                    distinct_identity=policy.gs_distinct_identity,
                )
                fired = margin is not None and margin > tau * length
            if fired:
                stage = k
                break
    elif policy.kind in ("ets", "ets+gs"):
        if policy.ets is None:
            raise PolicyError("ETS policy missing a trained classifier")
        seq = build_sequences(
            ctx.s1_feature[None, :],
            hamming.PackedCodes(
                ctx.stage_codes[0].words[None, :], ctx.stage_codes[0].length, stage=1
            ),
            index,
        )
        label = LABELS[int(policy.ets.predict(seq)[0])]
        dists[1] = _top1_dist(ctx, index, 1)
        if label in ("easy", "skip"):
            stage = 1
        elif policy.kind == "ets":
            stage = 4
        else:
            if policy.tau_gs is None:
                raise PolicyError("ets+gs policy missing calibrated GS threshold")
            stage = 4
            for k in (2, 3):
                length = ctx.stage_codes[k - 1].length
                dists[k] = _top1_dist(ctx, index, k)
                margin = gs_margin(
                    ctx.stage_codes[k - 1],
                    index,
                    stage=k,
                    distinct_identity=policy.gs_distinct_identity,
                )
                if margin is not None and margin > policy.tau_gs * length:
                    stage = k
                    break
    else:  # pragma: no cover - PolicyState validates kinds
        raise PolicyError(f"unknown policy kind {policy.kind!r}")

    if budget_cap is not None:
        stage = min(stage, int(budget_cap))
    return ExitDecision(query_id=ctx.query_id, stage=stage, label=label, top1_dists=dists)


def assign_exits(
    policy: PolicyState,
    contexts: Sequence[QueryContext],
    index: hamming.GalleryIndex,
    rng: np.random.Generator | None = None,
    budget_cap: int | None = None,
) -> list[ExitDecision]:
    """decide_exit over a query set, in order (the random policy's draws are
    consumed in query order, so results are reproducible for a fixed seed)."""
    return [
        decide_exit(policy, ctx, index, rng=rng, budget_cap=budget_cap)
        for ctx in contexts
    ]
