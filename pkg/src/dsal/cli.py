"""Command line entry point: ``dsal generate | run | report``.

Exit codes: 0 success, 2 configuration error, 3 data error (missing or
malformed dataset / CSV), 4 training divergence, 5 filesystem error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .active import Learner, RoundMetrics, run_policy, run_reference
from .config import ExperimentConfig, load_config, override
from .data import PGMError, Sample, load_split, make_dataset, save_pair
from .metrics import spearman_rank
from .segnet import ConfigError, TrainingDivergedError, save_checkpoint
from .svg import PALETTE, Chart

log = logging.getLogger("dsal")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_IO = 5

METRICS_COLUMNS = ["policy", "seed", "round", "labels_used", "test_dsc", "val_dsc",
                   "mean_pool_score", "spearman_score_vs_rdsc"]
SCORES_COLUMNS = ["policy", "seed", "round", "sample_id", "l_dsc", "m_dsc", "mean_score", "r_dsc"]
SPLITS = ("train", "val", "test")


class DataError(Exception):
    pass


def _num(v) -> str:
    if v is None:
        return ""
    v = float(v)
    return "nan" if np.isnan(v) else repr(v)


# ---------------------------------------------------------------------------
# generate


def cmd_generate(cfg: ExperimentConfig) -> Path:
    """Write every split as PGM pairs plus ``manifest.txt`` (written last)."""
    root = cfg.data_path
    splits = make_dataset(cfg.dataset)
    lines = ["# dsal dataset manifest", f"seed={cfg.dataset.seed}",
             f"resolution={cfg.dataset.resolution[0]}x{cfg.dataset.resolution[1]}"]
    for split, samples in zip(SPLITS, splits):
        for s in samples:
            save_pair(s, root / split)
            lines.append(f"{split} {s.id}")
    manifest = root / "manifest.txt"
    tmp = root / ".manifest.tmp"
    tmp.write_text("\n".join(lines) + "\n")
    tmp.replace(manifest)
    return manifest


def load_dataset(cfg: ExperimentConfig) -> Tuple[List[Sample], List[Sample], List[Sample]]:
    root = cfg.data_path
    if not (root / "manifest.txt").exists():
        raise DataError(f"no dataset at {root} (missing manifest.txt); run `dsal generate` first")
    out = []
    try:
        for split in SPLITS:
            out.append(load_split(root / split))
    except PGMError as exc:
        raise DataError(str(exc)) from None
    expected = (cfg.dataset.n_train, cfg.dataset.n_val, cfg.dataset.n_test)
    found = tuple(len(s) for s in out)
    if found != expected:
        raise DataError(f"dataset at {root} has split sizes {found}, config expects {expected}")
    for s in out[0] + out[1] + out[2]:
        if s.mask is None:
            raise DataError(f"sample {s.id} has no mask")
        if s.image.shape[1:] != cfg.model.input_size:
            raise DataError(f"sample {s.id} is {s.image.shape[1:]}, model expects {cfg.model.input_size}")
    return out[0], out[1], out[2]


# ---------------------------------------------------------------------------
# run


def _run_job(cfg: ExperimentConfig, kind: str, seed: int, train, val, test, ckpt_dir: Optional[Path]):
    """One (policy, seed) curve or the ("full", seed) reference."""
    if kind == "full":
        def on_done(learner: Learner, metrics: RoundMetrics):
            if ckpt_dir is not None:
                save_checkpoint(learner.model, ckpt_dir / f"full_seed{seed}.ckpt", 0)

        return [run_reference(train, val, test, cfg.model, cfg.train, cfg.reference_epochs, seed, on_done)]
    policy = next(p for p in cfg.policies if p.kind == kind)

    def on_round(state, learner: Learner, metrics: RoundMetrics):
        if ckpt_dir is not None:
            save_checkpoint(learner.model, ckpt_dir / f"{kind}_seed{seed}_round{metrics.round:02d}.ckpt",
                            metrics.round)

    return run_policy(train, val, test, cfg.model, cfg.train, policy, cfg.n_init, cfg.label_budget,
                      seed, on_round)


def _jobs(cfg: ExperimentConfig) -> List[Tuple[str, int]]:
    jobs = []
    for seed in cfg.seeds:
        jobs += [(p.kind, seed) for p in cfg.policies]
        if cfg.reference_epochs > 0:
            jobs.append(("full", seed))
    return jobs


def _metric_rows(kind: str, seed: int, history: Sequence[RoundMetrics]) -> List[list]:
    return [[kind, seed, m.round, m.labels_used, _num(m.test_dsc), _num(m.val_dsc),
             _num(m.mean_pool_score), _num(m.spearman_score_vs_rdsc)] for m in history]


def _score_rows(kind: str, seed: int, history: Sequence[RoundMetrics]) -> List[list]:
    return [[kind, seed, s.round, s.sample_id, _num(s.l_dsc), _num(s.m_dsc), _num(s.mean_score), _num(s.r_dsc)]
            for m in history for s in m.scores]


def cmd_run(cfg: ExperimentConfig, threads: int = 1, checkpoints: bool = True) -> Path:
    """Run every (policy, seed) job and write ``metrics.csv`` and ``scores.csv``.

    Rows are written in job order through one writer, after each job, so a
    failure leaves the completed jobs on disk.
    """
    train, val, test = load_dataset(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out / "checkpoints" if checkpoints else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(exist_ok=True)
    metrics_path = out / "metrics.csv"
    scores_path = out / "scores.csv"
    jobs = _jobs(cfg)
    header = f"# dsal {__version__} config_sha256={cfg.digest()}\n"
    with open(metrics_path, "w", newline="") as mf, open(scores_path, "w", newline="") as sf:
        mf.write(header)
        sf.write(header)
        mw, sw = csv.writer(mf, lineterminator="\n"), csv.writer(sf, lineterminator="\n")
        mw.writerow(METRICS_COLUMNS)
        sw.writerow(SCORES_COLUMNS)

        def emit(kind, seed, history):
            mw.writerows(_metric_rows(kind, seed, history))
            sw.writerows(_score_rows(kind, seed, history))
            mf.flush()
            sf.flush()
            log.info("finished %s seed=%s (%d rows)", kind, seed, len(history))

        if threads > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
                futures = [pool.submit(_run_job, cfg, k, s, train, val, test, ckpt_dir) for k, s in jobs]
                for (kind, seed), fut in zip(jobs, futures):
                    emit(kind, seed, fut.result())
        else:
            for kind, seed in jobs:
                emit(kind, seed, _run_job(cfg, kind, seed, train, val, test, ckpt_dir))
    return metrics_path


# ---------------------------------------------------------------------------
# report


class ReportError(DataError):
    pass


def read_csv(path, columns: Sequence[str]) -> List[dict]:
    """Parse a dsal CSV; ``#`` lines are comments. Errors name the line."""
    rows = []
    header = None
    numeric = {"seed", "round", "labels_used"}
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.startswith("#") or not line.strip():
                continue
            fields = next(csv.reader([line]))
            if header is None:
                if fields != list(columns):
                    raise ReportError(f"{path}:{lineno}: expected header {','.join(columns)}")
                header = fields
                continue
            if len(fields) != len(header):
                raise ReportError(f"{path}:{lineno}: expected {len(header)} fields, found {len(fields)}")
            row = {}
            for name, raw in zip(header, fields):
                if name in ("policy", "sample_id"):
                    if not raw:
                        raise ReportError(f"{path}:{lineno}: empty {name}")
                    row[name] = raw
                    continue
                try:
                    if name in numeric:
                        row[name] = int(raw)
                    else:
                        row[name] = float(raw) if raw else None
                except ValueError:
                    raise ReportError(f"{path}:{lineno}: bad value {raw!r} for {name}") from None
            rows.append(row)
    if header is None:
        raise ReportError(f"{path}: missing header")
    if not rows:
        raise ReportError(f"{path}: no data rows")
    return rows


def learning_curves(rows: Sequence[dict]) -> Dict[str, Dict[int, List[float]]]:
    """policy -> labels_used -> per-seed test DSC values (reference rows excluded)."""
    curves: Dict[str, Dict[int, List[float]]] = {}
    for r in rows:
        if r["policy"] == "full" or r["test_dsc"] is None:
            continue
        curves.setdefault(r["policy"], {}).setdefault(r["labels_used"], []).append(r["test_dsc"])
    return curves


def full_annotation_dsc(rows: Sequence[dict]) -> Tuple[Optional[float], str]:
    ref = [r["test_dsc"] for r in rows if r["policy"] == "full" and r["test_dsc"] is not None]
    if ref:
        return float(np.mean(ref)), "full-annotation reference runs"
    top = max(r["labels_used"] for r in rows)
    vals = [r["test_dsc"] for r in rows if r["labels_used"] == top and r["test_dsc"] is not None]
    if not vals:
        return None, "unavailable"
    return float(np.mean(vals)), f"curve points at the largest label count ({top})"


def labels_to_reach(curve: Dict[int, List[float]], target: float) -> Optional[int]:
    for labels in sorted(curve):
        if np.mean(curve[labels]) >= target:
            return labels
    return None


def cmd_report(csv_path, output_dir=None, scores_path=None) -> Dict[str, Path]:
    csv_path = Path(csv_path)
    rows = read_csv(csv_path, METRICS_COLUMNS)
    out = Path(output_dir) if output_dir else csv_path.parent
    out.mkdir(parents=True, exist_ok=True)
    curves = learning_curves(rows)
    full, full_src = full_annotation_dsc(rows)

    chart = Chart("Test DSC vs. annotated samples", "labels used", "test DSC")
    for i, (policy, curve) in enumerate(sorted(curves.items())):
        xs = sorted(curve)
        means = [float(np.mean(curve[x])) for x in xs]
        color = PALETTE[i % len(PALETTE)]
        if max(len(v) for v in curve.values()) > 1:
            chart.line(xs, means, policy, color, [min(curve[x]) for x in xs], [max(curve[x]) for x in xs])
        else:
            chart.line(xs, means, policy, color)
    if full is not None and any(r["policy"] == "full" for r in rows):
        chart.hline(full, "full annotation")
    paths = {"curves": out / "learning_curves.svg"}
    paths["curves"].write_text(chart.render())

    lines = [f"source: {csv_path.name}"]
    for line in open(csv_path):
        if line.startswith("#"):
            lines.append(line.strip())
            break
    pool = max(r["labels_used"] for r in rows)
    if full is None:
        lines.append("full-annotation DSC: unavailable")
    else:
        lines.append(f"full-annotation DSC: {full:.4f} ({full_src})")
        lines.append("labels needed to reach 95% of full-annotation DSC:")
        for policy, curve in sorted(curves.items()):
            need = labels_to_reach(curve, 0.95 * full)
            if need is None:
                lines.append(f"  {policy}: not reached (max {max(curve)} labels)")
            else:
                lines.append(f"  {policy}: {need} labels ({100.0 * need / pool:.2f}% of {pool})")
    for policy, curve in sorted(curves.items()):
        pts = ", ".join(f"{x}:{np.mean(curve[x]):.4f}" for x in sorted(curve))
        lines.append(f"curve {policy}: {pts}")

    scores_path = Path(scores_path) if scores_path else csv_path.parent / "scores.csv"
    if scores_path.exists():
        srows = [r for r in read_csv(scores_path, SCORES_COLUMNS) if r["r_dsc"] is not None]
        xs = [r["mean_score"] for r in srows]
        ys = [r["r_dsc"] for r in srows]
        rho = spearman_rank(xs, ys) if len(srows) >= 3 else None
        sc = Chart("Consistency score vs. real DSC", "mean consistency score", "real DSC")
        sc.scatter(xs, ys, f"{len(srows)} pool samples", PALETTE[0])
        sc.note("Spearman rho = " + ("undefined" if rho is None else f"{rho:.3f}"))
        paths["scatter"] = out / "correlation.svg"
        paths["scatter"].write_text(sc.render())
        lines.append("Spearman rho (mean consistency vs real DSC, all scored samples): "
                     + ("undefined" if rho is None else f"{rho:.3f}"))
    else:
        lines.append(f"no per-sample scores at {scores_path}; correlation plot skipped")
    paths["summary"] = out / "summary.txt"
    paths["summary"].write_text("\n".join(lines) + "\n")
    return paths


# ---------------------------------------------------------------------------


def _threads() -> int:
    raw = os.environ.get("DSAL_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"DSAL_THREADS must be an integer, got {raw!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dsal", description="Deeply supervised active learning for segmentation")
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (("generate", "write the synthetic dataset"),
                           ("run", "run the active learning experiment")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="INI experiment config (defaults used when omitted)")
        p.add_argument("--output", help="output directory (overrides [experiment] output_dir)")
        p.add_argument("--seed-override", type=int, help="run a single seed")
        p.add_argument("--policy", help="run a single query policy")
    sub.choices["run"].add_argument("--no-checkpoints", action="store_true")
    p = sub.add_parser("report", help="plot learning curves and correlations from metrics.csv")
    p.add_argument("csv", help="metrics.csv written by `dsal run`")
    p.add_argument("--output", help="directory for SVGs and summary (default: next to the CSV)")
    p.add_argument("--scores", help="per-sample scores CSV (default: scores.csv next to the metrics)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "report":
            paths = cmd_report(args.csv, args.output, args.scores)
            for p in paths.values():
                print(p)
            return EXIT_OK
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        cfg = override(cfg, args.output, args.seed_override, args.policy)
        if args.command == "generate":
            print(cmd_generate(cfg))
        else:
            print(cmd_run(cfg, threads=_threads(), checkpoints=not args.no_checkpoints))
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
