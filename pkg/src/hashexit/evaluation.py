"""Retrieval metrics, budgeted-inference curves and exit accounting.

Metrics follow the single-gallery-shot convention: queries without any
gallery positive are dropped from CMC/mAP but counted. Rank-1 and mAP are
reported as percentages.

Budget assignment uses a level-wise raise rule: starting from stage 1 for
everyone, single-stage raises are enumerated in (target stage, query index)
order and the longest affordable prefix is applied. The applied raises for a
smaller budget are therefore always a prefix of those for a larger one, which
makes exit sets nested across budgets and realized cost never exceed the cap.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import hamming
from .errors import BudgetError, ConfigError, EvaluationError

N_STAGES = 4


@dataclass(frozen=True)
class RetrievalEval:
    """CMC curve (percent, rank 1..len) and mAP (percent) over valid queries."""

    cmc: np.ndarray
    mean_ap: float
    n_valid: int
    n_excluded: int

    @property
    def rank1(self) -> float:
        return float(self.cmc[0])


def average_precision(relevant: np.ndarray) -> float:
    """AP of one ranked relevance vector (bool, rank order). NaN-free: the
    caller guarantees at least one positive."""
    relevant = np.asarray(relevant, dtype=bool)
    hits = np.flatnonzero(relevant)
    ranks = hits + 1.0
    precision = np.arange(1, hits.size + 1, dtype=np.float64) / ranks
    return float(precision.sum() / hits.size)


def cmc_map(
    rankings: Sequence[np.ndarray],
    query_ids: np.ndarray,
    gallery_ids: np.ndarray,
    max_rank: int = 20,
) -> RetrievalEval:
    """Compute CMC and mAP from per-query ranked gallery positions.

    `rankings[i]` holds gallery positions for query i, best first, after any
    filtering. Queries whose ranking contains no positive are excluded from
    the averages and reported in `n_excluded`.
    """
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    if len(rankings) != query_ids.shape[0]:
        raise EvaluationError("one ranking per query required")
    cmc_hits = np.zeros(max_rank, dtype=np.float64)
    ap_sum = 0.0
    n_valid = 0
    n_excluded = 0
    for ranking, qid in zip(rankings, query_ids):
        rel = gallery_ids[ranking] == qid
        if not rel.any():
            n_excluded += 1
            continue
        n_valid += 1
        ap_sum += average_precision(rel)
        first = int(np.flatnonzero(rel)[0])
        if first < max_rank:
            cmc_hits[first:] += 1.0
    if n_valid == 0:
        raise EvaluationError("no query has a gallery positive")
    return RetrievalEval(
        cmc=cmc_hits / n_valid * 100.0,
        mean_ap=ap_sum / n_valid * 100.0,
        n_valid=n_valid,
        n_excluded=n_excluded,
    )


def stage_rankings(
    query_codes: Sequence[hamming.PackedCodes],
    index: hamming.GalleryIndex,
    query_ids: np.ndarray | None = None,
    query_cams: np.ndarray | None = None,
    same_camera_filter: bool = False,
) -> list[list[np.ndarray]]:
    """Full gallery rankings for every query at every stage.

    Returns rankings[k][i]: ranked gallery positions for query i using
    stage-(k+1) codes.
    """
    out: list[list[np.ndarray]] = []
    for stage_idx, codes in enumerate(query_codes, start=1):
        per_stage = []
        for i in range(len(codes)):
            kwargs = {}
            if same_camera_filter:
                kwargs = dict(
                    query_id=int(query_ids[i]),
                    query_cam=int(query_cams[i]),
                    same_camera_filter=True,
                )
            per_stage.append(hamming.full_ranking(codes[i], index, stage=stage_idx, **kwargs).positions)
        out.append(per_stage)
    return out


def stagewise_eval(
    query_codes: Sequence[hamming.PackedCodes],
    query_ids: np.ndarray,
    index: hamming.GalleryIndex,
    max_rank: int = 20,
    query_cams: np.ndarray | None = None,
    same_camera_filter: bool = False,
) -> dict[int, RetrievalEval]:
    """Evaluate each stage's codes independently (no exiting)."""
    rankings = stage_rankings(
        query_codes, index, query_ids, query_cams, same_camera_filter
    )
    return {
        k + 1: cmc_map(rankings[k], query_ids, index.ids, max_rank=max_rank)
        for k in range(len(query_codes))
    }


@dataclass(frozen=True)
class PerQueryStageMetrics:
    """Per-(query, stage) retrieval facts feeding budget curves and logs."""

    correct: np.ndarray  # (n_queries, 4) bool: stage top-1 identity correct
    ap: np.ndarray       # (n_queries, 4) float: stage AP (NaN if no positive)
    top1_dist: np.ndarray  # (n_queries, 4) int: stage top-1 Hamming distance


def per_query_stage_metrics(
    query_codes: Sequence[hamming.PackedCodes],
    query_ids: np.ndarray,
    index: hamming.GalleryIndex,
) -> PerQueryStageMetrics:
    n_q = len(query_codes[0])
    n_stages = len(query_codes)
    correct = np.zeros((n_q, n_stages), dtype=bool)
    ap = np.full((n_q, n_stages), np.nan)
    top1 = np.zeros((n_q, n_stages), dtype=np.int64)
    for k, codes in enumerate(query_codes, start=1):
        for i in range(n_q):
            ranking = hamming.full_ranking(codes[i], index, stage=k)
            rel = ranking.ids == query_ids[i]
            correct[i, k - 1] = bool(rel[0])
            top1[i, k - 1] = int(ranking.distances[0])
            if rel.any():
                ap[i, k - 1] = average_precision(rel)
    return PerQueryStageMetrics(correct=correct, ap=ap, top1_dist=top1)


@dataclass(frozen=True)
class CostModel:
    """Per-stage incremental compute fractions; must sum to 1."""

    fractions: tuple[float, float, float, float] = (0.20, 0.20, 0.30, 0.30)
    total_flops: float | None = None

    def __post_init__(self):
        if len(self.fractions) != N_STAGES:
            raise ConfigError("cost model needs four stage fractions")
        if min(self.fractions) < 0:
            raise ConfigError("cost fractions must be non-negative")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError(f"cost fractions sum to {sum(self.fractions)}, expected 1")

    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.fractions)


def assign_stages_under_budget(
    desired: np.ndarray, cost: CostModel, budget: float
) -> np.ndarray:
    """Clamp per-query desired exit stages to an average-cost budget.

    Every query pays for stage 1; raises toward each query's desired stage
    are then applied breadth-first (all raises to stage 2 in query order,
    then to stage 3, then 4) as a longest affordable prefix.
    """
    desired = np.asarray(desired, dtype=np.int64)
    cum = cost.cumulative()
    if budget < cum[0] - 1e-12:
        raise BudgetError(
            f"budget {budget} below the stage-1 cost fraction {cum[0]}"
        )
    n = desired.size
    assigned = np.ones(n, dtype=np.int64)
    spent = n * cum[0]
    allowance = budget * n + 1e-9  # tolerate float dust at exact budgets
    for target in range(2, N_STAGES + 1):
        step = cost.fractions[target - 1]
        for q in range(n):
            if desired[q] < target:
                continue
            if spent + step > allowance:
                return assigned
            spent += step
            assigned[q] = target
    return assigned


@dataclass(frozen=True)
class BudgetPoint:
    """One point of the accuracy-vs-compute curve (rank1/mAP in percent)."""

    budget: float
    realized_cost: float
    rank1: float
    mean_ap: float
    exits: tuple[int, int, int, int]
    correct_exits: int
    incorrect_exits: int


def budget_curve(
    desired_stages: np.ndarray,
    metrics: PerQueryStageMetrics,
    cost: CostModel,
    budgets: Sequence[float],
) -> list[BudgetPoint]:
    """Sweep budgets, exiting easy/skip queries early and propagating the
    rest as deep as the average-cost cap affords."""
    budgets = list(budgets)
    if budgets != sorted(budgets):
        raise BudgetError("budgets must be ascending")
    cum = cost.cumulative()
    n = desired_stages.size
    points = []
    for budget in budgets:
        assigned = assign_stages_under_budget(desired_stages, cost, budget)
        sel = assigned - 1
        correct = metrics.correct[np.arange(n), sel]
        ap = metrics.ap[np.arange(n), sel]
        valid = ~np.isnan(ap)
        if not valid.any():
            raise EvaluationError("no valid queries in budget evaluation")
        exits = tuple(int((assigned == k).sum()) for k in range(1, N_STAGES + 1))
        exited1 = assigned == 1
        c1 = int((exited1 & metrics.correct[:, 0]).sum())
        points.append(
            BudgetPoint(
                budget=float(budget),
                realized_cost=float(cum[sel].mean()),
                rank1=float(correct[valid].mean() * 100.0),
                mean_ap=float(ap[valid].mean() * 100.0),
                exits=exits,
                correct_exits=c1,
                incorrect_exits=int(exited1.sum()) - c1,
            )
        )
    return points


@dataclass(frozen=True)
class ExitReport:
    """Stage-1 exit accounting: correct/incorrect counts plus the maximum
    achievable correct count (all queries whose stage-1 top-1 is right)."""

    correct_exits: int
    incorrect_exits: int
    maximum: int

    @property
    def total_exited(self) -> int:
        return self.correct_exits + self.incorrect_exits


def exit_report(exit_stages: np.ndarray, stage1_correct: np.ndarray) -> ExitReport:
    exit_stages = np.asarray(exit_stages)
    stage1_correct = np.asarray(stage1_correct, dtype=bool)
    exited = exit_stages == 1
    correct = int((exited & stage1_correct).sum())
    return ExitReport(
        correct_exits=correct,
        incorrect_exits=int(exited.sum()) - correct,
        maximum=int(stage1_correct.sum()),
    )


# -- report files ------------------------------------------------------------------


def _write_rows(path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def write_stagewise_csv(path, results: Mapping[int, RetrievalEval]) -> None:
    rows = [
        [k, f"{r.rank1:.4f}", f"{r.mean_ap:.4f}", r.n_valid, r.n_excluded]
        for k, r in sorted(results.items())
    ]
    _write_rows(path, ["stage", "rank1", "mAP", "n_valid", "n_excluded"], rows)


def write_budget_csv(path, points: Sequence[BudgetPoint], cost: CostModel) -> None:
    header = [
        "budget", "realized_cost", "rank1", "mAP",
        "exit_s1", "exit_s2", "exit_s3", "exit_s4",
        "correct_exits_s1", "incorrect_exits_s1",
    ]
    rows = [
        [
            f"{p.budget:.4f}", f"{p.realized_cost:.6f}",
            f"{p.rank1:.4f}", f"{p.mean_ap:.4f}",
            *p.exits, p.correct_exits, p.incorrect_exits,
        ]
        for p in points
    ]
    _write_rows(path, header, rows)
    # gnuplot-friendly twin: same columns, space separated, '#' header
    dat = os.fspath(path)
    dat = dat[: dat.rfind(".")] + ".dat" if "." in os.path.basename(dat) else dat + ".dat"
    with open(dat, "w", encoding="utf-8") as fh:
        fh.write("# " + " ".join(header) + "\n")
        for row in rows:
            fh.write(" ".join(str(v) for v in row) + "\n")


def write_exit_report_csv(path, reports: Mapping[str, ExitReport]) -> None:
    rows = [
        [name, r.correct_exits, r.incorrect_exits, r.total_exited, r.maximum]
        for name, r in reports.items()
    ]
    _write_rows(
        path,
        ["policy", "correct_exits", "incorrect_exits", "total_exited", "maximum"],
        rows,
    )


def write_decision_log(path, records: Sequence[dict]) -> None:
    """Line-oriented decision log: one row per query with the policy label,
    chosen exit stage and the top-1 distance at every *computed* stage."""
    header = ["query_id", "label", "exit_stage", "d1", "d2", "d3", "d4"]
    rows = []
    for rec in records:
        dists = rec.get("top1_dists", {})
        rows.append(
            [
                rec["query_id"],
                rec["label"],
                rec["exit_stage"],
                *[dists.get(k, "") for k in range(1, N_STAGES + 1)],
            ]
        )
    _write_rows(path, header, rows)


def read_decision_log(path) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            dists = {
                k: int(row[f"d{k}"])
                for k in range(1, N_STAGES + 1)
                if row[f"d{k}"] != ""
            }
            out.append(
                {
                    "query_id": int(row["query_id"]),
                    "label": row["label"],
                    "exit_stage": int(row["exit_stage"]),
                    "top1_dists": dists,
                }
            )
    return out
