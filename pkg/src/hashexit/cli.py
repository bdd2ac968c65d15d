"""Command-line front end.

Commands mirror the pipeline order:

    train            generate data, train the encoder, record flip statistics
    collect-flips    recompute flip statistics from saved encoder snapshots
    train-policy     fit the exit classifier and calibrate QS/GS thresholds
    encode-gallery   write HRC1 code files + HRE1 features for a split
    eval             stage-wise rank-1/mAP table
    budget           exit decisions, budget curve, exit report, decision log
    bench-hamming    binary vs continuous distance timing table
    search           top-k lookup of query codes against a gallery code file
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

import numpy as np

from . import evaluation, hamming, training
from .config import RunConfig
from .errors import DependencyError, HashExitError
from .policy import assign_exits
from .training import RunPaths


def _resolve_config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = RunConfig.load(args.config)
    elif getattr(args, "out", None) and (Path(args.out) / "config.txt").exists():
        cfg = RunConfig.load(Path(args.out) / "config.txt")
    else:
        cfg = RunConfig()
    return cfg.with_overrides(seed=getattr(args, "seed", None))


def _paths(args) -> RunPaths:
    return RunPaths(Path(args.out))


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    paths = _paths(args)
    paths.root.mkdir(parents=True, exist_ok=True)
    cfg.save(paths.config)
    dataset = training.prepare_dataset(cfg, paths)
    training.train_encoder(cfg, dataset, paths)
    print(f"trained encoder for {cfg.epochs} epochs -> {paths.encoder_prefix('final')}")
    print(f"flip histories -> {paths.flips}")
    return 0


def cmd_collect_flips(args) -> int:
    cfg = _resolve_config(args)
    paths = _paths(args)
    dataset = training.load_run_dataset(paths)
    histories = training.replay_flips(cfg, dataset, paths)
    from .policy import write_flip_histories

    write_flip_histories(paths.flips, histories)
    print(f"replayed {len(histories)} flip histories -> {paths.flips}")
    return 0


def cmd_train_policy(args) -> int:
    cfg = _resolve_config(args)
    paths = _paths(args)
    dataset = training.load_run_dataset(paths)
    encoder = training.load_encoder(cfg, paths)
    _, updated = training.train_exit_policy(cfg, dataset, encoder, paths)
    print(f"exit classifier -> {paths.ets_prefix}")
    print(f"calibrated tau_qs={updated.tau_qs:.6f} tau_gs={updated.tau_gs:.6f}")
    return 0


def cmd_encode_gallery(args) -> int:
    cfg = _resolve_config(args)
    paths = _paths(args)
    dataset = training.load_run_dataset(paths)
    encoder = training.load_encoder(cfg, paths)
    split = getattr(dataset, args.split)
    codes, s1 = training.encode_split(encoder, split.maps)
    training.write_split_codes(paths, args.split, codes, s1, split.ids, split.cams)
    print(
        f"encoded {len(split)} {args.split} samples at stages 1-4 -> {paths.codes_dir}"
    )
    return 0


def _gallery_index(cfg: RunConfig, paths: RunPaths) -> hamming.GalleryIndex:
    if cfg.data_source == "files":
        src = RunPaths(Path(cfg.files_dir))
        codes, s1, ids, cams = training.read_split_codes(src, "gallery")
    else:
        codes, s1, ids, cams = training.read_split_codes(paths, "gallery")
    return training.build_index(codes, ids, cams, s1)


def _query_side(cfg: RunConfig, paths: RunPaths, from_files: bool):
    if cfg.data_source == "files":
        src = RunPaths(Path(cfg.files_dir))
        return training.read_split_codes(src, "query")
    if from_files:
        return training.read_split_codes(paths, "query")
    dataset = training.load_run_dataset(paths)
    encoder = training.load_encoder(cfg, paths)
    codes, s1 = training.encode_split(encoder, dataset.query.maps)
    return codes, s1, dataset.query.ids, dataset.query.cams


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    paths = _paths(args)
    index = _gallery_index(cfg, paths)
    codes, _, ids, cams = _query_side(cfg, paths, args.from_files)
    results = evaluation.stagewise_eval(
        codes,
        ids,
        index,
        query_cams=cams,
        same_camera_filter=cfg.same_camera_filter,
    )
    paths.reports_dir.mkdir(parents=True, exist_ok=True)
    out_csv = paths.reports_dir / "stagewise.csv"
    evaluation.write_stagewise_csv(out_csv, results)
    print("stage  rank1    mAP      valid  excluded")
    for k, r in sorted(results.items()):
        print(f"S{k}     {r.rank1:7.2f} {r.mean_ap:7.2f}  {r.n_valid:5d}  {r.n_excluded:5d}")
    print(f"-> {out_csv}")
    return 0


def cmd_budget(args) -> int:
    cfg = _resolve_config(args)
    if args.policy:
        cfg = cfg.with_overrides(policy=args.policy)
    paths = _paths(args)
    index = _gallery_index(cfg, paths)
    codes, s1, ids, _ = _query_side(cfg, paths, args.from_files)
    contexts = training.make_query_contexts(codes, s1, ids)
    state = training.load_policy_state(cfg, paths)
    decisions = assign_exits(state, contexts, index, rng=cfg.substream("policy"))
    metrics = evaluation.per_query_stage_metrics(codes, ids, index)
    budgets = (
        tuple(float(b) for b in args.budgets.split(",")) if args.budgets else cfg.budgets
    )
    points = evaluation.budget_curve(
        np.array([d.stage for d in decisions]),
        metrics,
        cfg.cost_model(),
        budgets,
    )
    report = evaluation.exit_report(
        np.array([d.stage for d in decisions]), metrics.correct[:, 0]
    )
    paths.reports_dir.mkdir(parents=True, exist_ok=True)
    evaluation.write_budget_csv(paths.reports_dir / "budget.csv", points, cfg.cost_model())
    evaluation.write_exit_report_csv(
        paths.reports_dir / "exit_report.csv", {cfg.policy: report}
    )
    evaluation.write_decision_log(
        paths.reports_dir / "decisions.log",
        [
            {
                "query_id": d.query_id,
                "label": d.label,
                "exit_stage": d.stage,
                "top1_dists": d.top1_dists,
            }
            for d in decisions
        ],
    )
    print(f"policy={cfg.policy}  correct_exits={report.correct_exits} "
          f"incorrect_exits={report.incorrect_exits} maximum={report.maximum}")
    print("budget  cost    rank1    mAP     exits(s1..s4)")
    for p in points:
        print(
            f"{p.budget:6.2f} {p.realized_cost:7.3f} {p.rank1:7.2f} {p.mean_ap:7.2f}  "
            f"{p.exits}"
        )
    print(f"-> {paths.reports_dir / 'budget.csv'}")
    return 0


def cmd_bench_hamming(args) -> int:
    lengths = tuple(int(v) for v in args.lengths.split(","))
    rows = hamming.bench_table(
        lengths=lengths,
        n_gallery=args.gallery,
        n_queries=args.queries,
        rng=np.random.default_rng(args.seed if args.seed is not None else 0),
    )
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["length", "binary_us_per_pair", "continuous_us_per_pair", "ratio"])
    print("length  binary(us)  continuous(us)  ratio")
    for r in rows:
        writer.writerow([r.length, f"{r.binary_us:.6f}", f"{r.continuous_us:.6f}", f"{r.ratio:.1f}"])
        print(f"{r.length:6d}  {r.binary_us:10.4f}  {r.continuous_us:14.4f}  {r.ratio:5.1f}x")
    if args.out_file:
        Path(args.out_file).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out_file).write_text(buf.getvalue(), encoding="utf-8")
        print(f"-> {args.out_file}")
    return 0


def cmd_search(args) -> int:
    gallery_codes, gallery_ids, gallery_cams = hamming.read_codes_file(args.gallery_codes)
    query_codes, query_ids, _ = hamming.read_codes_file(args.query_codes)
    index = hamming.GalleryIndex(
        codes={gallery_codes.stage: gallery_codes},
        ids=gallery_ids,
        cams=gallery_cams,
    )
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["query_index", "query_id", "rank", "gallery_id", "distance"])
    for i in range(len(query_codes)):
        hits = hamming.topk(query_codes[i], index, k=args.k, stage=gallery_codes.stage)
        for rank, (gid, dist) in enumerate(zip(hits.ids, hits.distances), start=1):
            writer.writerow([i, int(query_ids[i]), rank, int(gid), int(dist)])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hashexit",
        description="Multi-exit binary-hash retrieval engine",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_out=True):
        p.add_argument("--config", help="config file (defaults to OUT/config.txt)")
        p.add_argument("--seed", type=int, help="override the config seed")
        if needs_out:
            p.add_argument("--out", required=True, help="run directory")

    p = sub.add_parser("train", help="generate data and train the encoder")
    add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("collect-flips", help="replay snapshots into flip statistics")
    add_common(p)
    p.set_defaults(func=cmd_collect_flips)

    p = sub.add_parser("train-policy", help="fit the exit classifier + thresholds")
    add_common(p)
    p.set_defaults(func=cmd_train_policy)

    p = sub.add_parser("encode-gallery", help="write HRC1/HRE1 files for a split")
    add_common(p)
    p.add_argument("--split", choices=("gallery", "query", "train"), default="gallery")
    p.set_defaults(func=cmd_encode_gallery)

    p = sub.add_parser("eval", help="stage-wise retrieval metrics")
    add_common(p)
    p.add_argument(
        "--from-files",
        action="store_true",
        help="read query codes from the run's code files instead of re-encoding",
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("budget", help="budgeted-inference curve and exit report")
    add_common(p)
    p.add_argument("--budgets", help="comma-separated budget fractions")
    p.add_argument("--policy", help="override the configured policy")
    p.add_argument("--from-files", action="store_true")
    p.set_defaults(func=cmd_budget)

    p = sub.add_parser("bench-hamming", help="binary vs continuous timing table")
    add_common(p, needs_out=False)
    p.add_argument("--lengths", default="128,256,512,1024,2048")
    p.add_argument("--gallery", type=int, default=4000)
    p.add_argument("--queries", type=int, default=50)
    p.add_argument("--out-file", help="write the table as CSV")
    p.set_defaults(func=cmd_bench_hamming)

    p = sub.add_parser("search", help="top-k lookup from code files")
    p.add_argument("--gallery-codes", required=True)
    p.add_argument("--query-codes", required=True)
    p.add_argument("-k", type=int, default=5)
    p.set_defaults(func=cmd_search)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except HashExitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
