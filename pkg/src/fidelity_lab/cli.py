"""Command-line front end: build, train, eval, refine, report, score.

Every flag can also be given in a ``--config`` file of flat ``key = value``
lines (keys are flag names with dashes or underscores). Explicit flags win
over the file; ``FIDELITY_LAB_SEED`` is the seed fallback when neither sets
one. Unknown keys are rejected. The fully resolved configuration is logged
as JSON at the start of every run.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import os
import sys
from collections import Counter, defaultdict
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, atomic_write_bytes
from .color_stats import compute_stats
from .palettes import CATEGORIES, NUM_PALETTES, palette_for

log = logging.getLogger("fidelity_lab")

SEED_ENV = "FIDELITY_LAB_SEED"


class CliError(Exception):
    """User-facing failure; reported without a traceback."""


# small helpers

def float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in str(text).split(",") if x.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in str(text).split(",") if x.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def str_list(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in str(text).split(",") if x.strip())


def parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.10g}"
    return str(v)


def csv_text(columns: Sequence[str], rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(r[c]) for c in columns])
    return buf.getvalue()


def write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def read_csv(path) -> tuple[list[str], list[dict[str, str]]]:
    path = Path(path)
    if not path.exists():
        raise CliError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        header = reader.fieldnames or []
    if not header or not rows:
        raise CliError(f"{path}: CSV has no data rows")
    return list(header), rows


def resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError as exc:
        raise CliError(f"{SEED_ENV} must be an integer, got {env!r}") from exc


def require_file(path, what: str) -> Path:
    if not path:
        raise CliError(f"missing {what} path")
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {p}")
    return p


# build

def cmd_build(args) -> int:
    from .dataset_builder import BuildConfig, build_dataset

    cfg = BuildConfig(out_dir=args.out, groups=args.groups, mode=args.mode, seed=args.seed,
                      split=args.split, gains=args.gains, scales=args.scales,
                      image_size=args.image_size, denoiser=args.denoiser, jobs=args.jobs)
    if cfg.mode == "diffusion":
        require_file(cfg.denoiser, "denoiser checkpoint")
    try:
        manifest = build_dataset(cfg)
    except PermissionError as exc:
        raise CliError(str(exc)) from exc
    table = Counter((g.category, g.split) for g in manifest.groups)
    print(f"{'category':<16}{'train':>7}{'test':>7}")
    for cat in dict.fromkeys(g.category for g in manifest.groups):
        print(f"{cat:<16}{table[(cat, 'train')]:>7}{table[(cat, 'test')]:>7}")
    print(f"manifest: {Path(args.out) / 'manifest.json'}")
    return 0


# train

def _loss_rows(step_losses, steps_per_epoch: int) -> list[dict]:
    return [{"step": i, "epoch": i // steps_per_epoch, "loss": v} for i, v in enumerate(step_losses)]


def denoiser_training_set(args) -> tuple[np.ndarray, np.ndarray]:
    from .dataset_builder import DatasetManifest, load_png, make_reference

    if args.manifest:
        mpath = require_file(args.manifest, "manifest")
        manifest = DatasetManifest.read(mpath)
        records = manifest.split("train")
        if not records:
            raise CliError("manifest has no train groups")
        images = np.stack([load_png(mpath.parent / r.images[0]) for r in records])
        return images, np.array([r.palette_id for r in records])
    n = args.references
    if n < 1:
        raise CliError("references must be >= 1")
    cats = [CATEGORIES[i % len(CATEGORIES)] for i in range(n)]
    images = np.stack([make_reference(c, args.seed * 1_000_003 + i, args.image_size) for i, c in enumerate(cats)])
    return images, np.array([palette_for(c) for c in cats])


def cmd_train(args) -> int:
    out = Path(args.out)
    loss_csv = Path(args.loss_csv) if args.loss_csv else out.with_suffix(out.suffix + ".loss.csv")
    if args.target == "denoiser":
        from .toy_diffusion import NoiseSchedule, train_denoiser

        images, labels = denoiser_training_set(args)
        res = train_denoiser(images, labels, cond_drop_prob=args.cond_drop, epochs=args.epochs,
                             lr=args.lr, seed=args.seed, batch_size=args.batch_size, hidden=args.hidden,
                             schedule=NoiseSchedule.linear(args.steps), num_classes=NUM_PALETTES)
        res.params.save(out)
        steps = max(1, len(res.losses) // max(1, args.epochs))
        write_text(loss_csv, csv_text(["step", "epoch", "loss"], _loss_rows(res.losses, steps)))
    else:
        from .cfm_scorer import ScorerConfig, TrainConfig, load_manifest_groups, train_scorer_arrays
        from .dataset_builder import DatasetManifest

        mpath = require_file(args.manifest, "manifest")
        manifest = DatasetManifest.read(mpath)
        try:
            groups, ids, _ = load_manifest_groups(manifest, mpath.parent, "train")
        except ValueError as exc:
            raise CliError(str(exc)) from exc
        tc = TrainConfig(tau=args.tau, lr=args.lr, epochs=args.epochs, batch_groups=args.batch_groups,
                         seed=args.seed, loss=args.loss, optimizer=args.optimizer,
                         visual_only=args.visual_only)
        sc = ScorerConfig(image_size=groups.shape[2], visual_only=args.visual_only)
        params, hist = train_scorer_arrays(groups, ids, tc, sc)
        params.save(out)
        steps = -(-groups.shape[0] // args.batch_groups)
        write_text(loss_csv, csv_text(["step", "epoch", "loss"], _loss_rows(hist.step_losses, steps)))
    print(f"checkpoint: {out}")
    print(f"loss curve: {loss_csv}")
    return 0


# eval

METRIC_COLUMNS = ["scorer", "split", "groups", "synpairs_accuracy", "realsyn_accuracy",
                  "spearman", "pearson", "kendall", "spearman_group_mean", "kendall_group_mean"]
LEVEL_COLUMNS = ["rank", "level", "mean_saturation", "rms_contrast", "mean_score"]
CATEGORY_COLUMNS = ["category", "groups", "mean_score"]


def group_metrics(S: np.ndarray) -> dict[str, float]:
    """Metrics for a ``(G, K)`` score matrix whose columns run from best to worst."""
    from .rank_metrics import ScoredPair, kendall_tau_b, pair_accuracy, pearson, spearman

    G, K = S.shape
    adjacent = [ScoredPair(S[g, k], S[g, k + 1]) for g in range(G) for k in range(K - 1)]
    extreme = [ScoredPair(S[g, 0], S[g, K - 1]) for g in range(G)]
    fidelity = np.tile(np.arange(K, 0, -1, dtype=np.float64), G)
    flat = S.reshape(-1)

    def safe(f, x, y):
        try:
            return f(x, y)
        except ValueError:
            return float("nan")

    per_group_s = [safe(spearman, S[g], fidelity[:K]) for g in range(G)]
    per_group_k = [safe(kendall_tau_b, S[g], fidelity[:K]) for g in range(G)]
    return {
        "synpairs_accuracy": pair_accuracy(adjacent),
        "realsyn_accuracy": pair_accuracy(extreme),
        "spearman": safe(spearman, flat, fidelity),
        "pearson": safe(pearson, flat, fidelity),
        "kendall": safe(kendall_tau_b, flat, fidelity),
        "spearman_group_mean": float(np.mean(per_group_s)),
        "kendall_group_mean": float(np.mean(per_group_k)),
    }


def scorer_function(args) -> tuple[str, Callable[[np.ndarray, np.ndarray], np.ndarray]]:
    """Returns ``(name, f)`` with ``f(groups (G,K,H,W,3), ids (G,)) -> scores (G,K)``."""
    if args.oracle:
        return "oracle", lambda groups, ids: np.tile(-np.arange(1.0, groups.shape[1] + 1), (groups.shape[0], 1))
    if args.random:
        rng = np.random.default_rng(args.seed)
        return "random", lambda groups, ids: rng.random(groups.shape[:2])
    from .cfm_scorer import ScorerParams, score_images

    path = require_file(args.scorer, "scorer checkpoint")
    params = ScorerParams.load(path)

    def f(groups, ids):
        G, K = groups.shape[:2]
        flat = groups.reshape((G * K,) + groups.shape[2:])
        return score_images(flat, np.repeat(ids, K), params).reshape(G, K)

    return path.stem, f


def cmd_eval(args) -> int:
    from .cfm_scorer import load_manifest_groups
    from .dataset_builder import DatasetManifest

    mpath = require_file(args.manifest, "manifest")
    manifest = DatasetManifest.read(mpath)
    name, f = scorer_function(args)
    try:
        groups, ids, records = load_manifest_groups(manifest, mpath.parent, args.split)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    S = f(groups, ids)
    row = {"scorer": name, "split": args.split, "groups": len(records), **group_metrics(S)}
    write_text(args.out, csv_text(METRIC_COLUMNS, [row]))

    if args.levels_csv:
        levels = records[0].levels
        rows = []
        for k in range(groups.shape[1]):
            stats = [compute_stats(img) for img in groups[:, k]]
            rows.append({"rank": k + 1, "level": 1.0 if k == 0 else levels[k - 1],
                         "mean_saturation": float(np.mean([s.mean_saturation for s in stats])),
                         "rms_contrast": float(np.mean([s.rms_contrast for s in stats])),
                         "mean_score": float(S[:, k].mean())})
        write_text(args.levels_csv, csv_text(LEVEL_COLUMNS, rows))
    if args.categories_csv:
        by_cat = defaultdict(list)
        for r, s in zip(records, S):
            by_cat[r.category].append(float(s.mean()))
        rows = [{"category": c, "groups": len(v), "mean_score": float(np.mean(v))} for c, v in by_cat.items()]
        write_text(args.categories_csv, csv_text(CATEGORY_COLUMNS, rows))

    print(",".join(METRIC_COLUMNS))
    print(",".join(fmt(row[c]) for c in METRIC_COLUMNS))
    return 0


# refine

SUMMARY_COLUMNS = ["mode", "n", "s0", "lam", "kappa", "mean_sat_before", "mean_sat_after",
                   "mean_delta_sat_before", "mean_delta_sat_after",
                   "mean_palette_distance_before", "mean_palette_distance_after",
                   "mean_score_before", "mean_score_after"]


def _refine_chunk(job) -> list:
    from .cfm_scorer import ScorerParams
    from .cfr import refine_batch
    from .toy_diffusion import DenoiserParams, sample_batch

    den_path, sc_path, conds, seeds, modes, s0, lam, kappa, recompute, images_dir = job
    den = DenoiserParams.load(den_path)
    sc = ScorerParams.load(sc_path)
    first = sample_batch(den, conds, seeds, s0)
    out = []
    for mode in modes:
        res = refine_batch(den, sc, conds, seeds, s0, lam, kappa, mode, recompute_every=recompute,
                           first_pass=first)
        out.extend(res.reports)
        if images_dir:
            from .dataset_builder import save_png

            for i, (c, sd) in enumerate(zip(conds, seeds)):
                if mode == modes[0]:
                    save_png(Path(images_dir) / f"c{c}_s{sd}_before.png", res.before[i])
                save_png(Path(images_dir) / f"c{c}_s{sd}_{res.reports[i].mode}.png", res.after[i])
    return out


def summarize_reports(reports, min_pass1_delta_sat: float = 0.0) -> list[dict]:
    by_mode: dict[str, list] = {}
    for r in reports:
        if r.delta_sat_before >= min_pass1_delta_sat:
            by_mode.setdefault(r.mode, []).append(r)
    rows = []
    for mode, rs in by_mode.items():
        def mean(attr):
            return float(np.mean([getattr(r, attr) for r in rs]))
        rows.append({"mode": mode, "n": len(rs), "s0": rs[0].s0, "lam": rs[0].lam, "kappa": rs[0].kappa,
                     "mean_sat_before": mean("sat_before"), "mean_sat_after": mean("sat_after"),
                     "mean_delta_sat_before": mean("delta_sat_before"),
                     "mean_delta_sat_after": mean("delta_sat_after"),
                     "mean_palette_distance_before": mean("palette_distance_before"),
                     "mean_palette_distance_after": mean("palette_distance_after"),
                     "mean_score_before": mean("score_before"), "mean_score_after": mean("score_after")})
    return rows


def cmd_refine(args) -> int:
    from .cfr import MODE_ALIASES, MODES, reports_to_csv

    den_path = require_file(args.denoiser, "denoiser checkpoint")
    sc_path = require_file(args.scorer, "scorer checkpoint")
    modes = [MODE_ALIASES.get(m, m) for m in args.modes]
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise CliError(f"unknown mode(s) {bad}; expected {list(MODES)}")
    conds = args.conds or tuple(range(NUM_PALETTES))
    grid = [(c, args.seed + i) for c in conds for i in range(args.seeds)]
    if not grid:
        raise CliError("empty condition/seed grid")
    n_chunks = max(1, min(args.jobs, len(grid)))
    chunks = [grid[i::n_chunks] for i in range(n_chunks)]
    jobs = [(str(den_path), str(sc_path), [c for c, _ in ch], [s for _, s in ch], modes,
             args.s0, args.lam, args.kappa, args.recompute_every, args.images_dir) for ch in chunks]
    if n_chunks > 1:
        with ProcessPoolExecutor(n_chunks) as pool:
            parts = list(pool.map(_refine_chunk, jobs))
    else:
        parts = [_refine_chunk(jobs[0])]
    order = {key: i for i, key in enumerate(grid)}
    reports = sorted((r for part in parts for r in part),
                     key=lambda r: (modes.index(r.mode), order[(r.palette_id, r.seed)]))
    write_text(args.out, reports_to_csv(reports))
    summary = summarize_reports(reports, args.min_pass1_delta_sat)
    summary_path = args.summary or str(Path(args.out).with_suffix(".summary.csv"))
    write_text(summary_path, csv_text(SUMMARY_COLUMNS, summary))
    print(csv_text(SUMMARY_COLUMNS, summary), end="")
    return 0


# report

SVG_W, SVG_H, PAD = 480, 320, 48


def _num(v: float) -> str:
    return f"{v:.2f}"


def _axes(title: str, xlabel: str, ylabel: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" '
        f'viewBox="0 0 {SVG_W} {SVG_H}">',
        f'<rect width="{SVG_W}" height="{SVG_H}" fill="white"/>',
        f'<text x="{SVG_W / 2}" y="20" text-anchor="middle" font-size="14">{_esc(title)}</text>',
        f'<line x1="{PAD}" y1="{SVG_H - PAD}" x2="{SVG_W - PAD}" y2="{SVG_H - PAD}" stroke="black"/>',
        f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{SVG_H - PAD}" stroke="black"/>',
        f'<text x="{SVG_W / 2}" y="{SVG_H - 10}" text-anchor="middle" font-size="12">{_esc(xlabel)}</text>',
        f'<text x="14" y="{SVG_H / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {SVG_H / 2})">{_esc(ylabel)}</text>',
    ]


def _esc(s: str) -> str:
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


def _range(vals) -> tuple[float, float]:
    lo, hi = min(vals), max(vals)
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"]


def line_chart_svg(series: dict[str, list[tuple[float, float]]], title: str, xlabel: str, ylabel: str) -> str:
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    (x0, x1), (y0, y1) = _range(xs), _range(ys)

    def px(x):
        return PAD + (x - x0) / (x1 - x0) * (SVG_W - 2 * PAD)

    def py(y):
        return SVG_H - PAD - (y - y0) / (y1 - y0) * (SVG_H - 2 * PAD)

    out = _axes(title, xlabel, ylabel)
    out.append(f'<text x="{PAD - 4}" y="{SVG_H - PAD}" text-anchor="end" font-size="10">{_num(y0)}</text>')
    out.append(f'<text x="{PAD - 4}" y="{PAD + 4}" text-anchor="end" font-size="10">{_num(y1)}</text>')
    for i, (name, pts) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{_num(px(x))},{_num(py(y))}" for x, y in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        for x, y in pts:
            out.append(f'<circle cx="{_num(px(x))}" cy="{_num(py(y))}" r="3" fill="{color}"/>')
        out.append(f'<text x="{SVG_W - PAD}" y="{PAD + 14 * i}" text-anchor="end" font-size="11" '
                   f'fill="{color}">{_esc(name)}</text>')
    for x in sorted(set(xs)):
        out.append(f'<text x="{_num(px(x))}" y="{SVG_H - PAD + 14}" text-anchor="middle" '
                   f'font-size="10">{_esc(fmt(x))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def bar_chart_svg(bars: list[tuple[str, float]], title: str, ylabel: str) -> str:
    vals = [v for _, v in bars]
    lo, hi = min(0.0, min(vals)), max(0.0, max(vals))
    if hi == lo:
        hi = lo + 1.0
    width = (SVG_W - 2 * PAD) / len(bars)

    def py(y):
        return SVG_H - PAD - (y - lo) / (hi - lo) * (SVG_H - 2 * PAD)

    out = _axes(title, "", ylabel)
    for i, (name, v) in enumerate(bars):
        x = PAD + i * width + 0.1 * width
        top, base = py(max(v, 0.0)), py(min(v, 0.0))
        out.append(f'<rect x="{_num(x)}" y="{_num(top)}" width="{_num(0.8 * width)}" '
                   f'height="{_num(base - top)}" fill="{PALETTE[0]}"/>')
        cx = x + 0.4 * width
        out.append(f'<text x="{_num(cx)}" y="{SVG_H - PAD + 12}" text-anchor="end" font-size="9" '
                   f'transform="rotate(-35 {_num(cx)} {SVG_H - PAD + 12})">{_esc(name)}</text>')
        out.append(f'<text x="{_num(cx)}" y="{_num(top - 3)}" text-anchor="middle" font-size="9">'
                   f'{_esc(f"{v:.3f}")}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _floats(rows, col, path) -> list[float]:
    try:
        return [float(r[col]) for r in rows]
    except (TypeError, ValueError) as exc:
        raise CliError(f"{path}: non-numeric value in column {col!r}") from exc


def svg_for_csv(path) -> str:
    header, rows = read_csv(path)
    cols = set(header)
    if {"level", "mean_saturation"} <= cols:
        key = "series" if "series" in cols else ("mode" if "mode" in cols else None)
        series: dict[str, list[tuple[float, float]]] = {}
        xs, ys = _floats(rows, "level", path), _floats(rows, "mean_saturation", path)
        for r, x, y in zip(rows, xs, ys):
            series.setdefault(r[key] if key else "mean saturation", []).append((x, y))
        for pts in series.values():
            pts.sort()
        return line_chart_svg(series, "Saturation vs distortion level", "level (gain or guidance scale)",
                              "mean saturation")
    if {"category", "mean_score"} <= cols:
        vals = _floats(rows, "mean_score", path)
        return bar_chart_svg([(r["category"], v) for r, v in zip(rows, vals)], "Mean score per category",
                             "mean score")
    if {"mode", "mean_delta_sat_after"} <= cols:
        vals = _floats(rows, "mean_delta_sat_after", path)
        return bar_chart_svg([(r["mode"], v) for r, v in zip(rows, vals)], "Saturation gap per refinement mode",
                             "mean |sat - 0.33|")
    raise CliError(f"{path}: unrecognized CSV columns {header}")


def cmd_report(args) -> int:
    svgs = [(Path(p), svg_for_csv(p)) for p in args.csv]
    out_dir = Path(args.out_dir) if args.out_dir else None
    for path, svg in svgs:
        target = (out_dir or path.parent) / (path.stem + ".svg")
        write_text(target, svg)
        print(f"wrote {target}")
    return 0


# score

def cmd_score(args) -> int:
    from .cfm_scorer import ScorerParams, encode, score
    from .dataset_builder import load_png

    params = ScorerParams.load(require_file(args.scorer, "scorer checkpoint"))
    img = load_png(require_file(args.image, "image"))
    if not 0 <= args.palette_id < params.config.num_classes:
        raise CliError(f"palette id must lie in [0, {params.config.num_classes})")
    print(f"{score(encode(img, args.palette_id, params), params):.10g}")
    return 0


# parser and config

def build_parser() -> argparse.ArgumentParser:
    from .cfm_scorer import TrainConfig
    from .cfr import DEFAULT_KAPPA, DEFAULT_LAMBDA, MODES
    from .dataset_builder import DEFAULT_GAINS, DEFAULT_SCALES, DEFAULT_SPLIT

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value file supplying defaults for any flag")
    common.add_argument("--seed", type=int, default=None, help=f"global seed (fallback: ${SEED_ENV}, then 0)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="fidelity-lab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build", parents=[common], help="write a fidelity-group dataset and manifest")
    b.add_argument("--out", required=True, help="output directory")
    b.add_argument("--mode", choices=["analytic", "diffusion"], default="analytic")
    b.add_argument("--groups", type=int, default=120)
    b.add_argument("--split", type=float, default=DEFAULT_SPLIT, help="train fraction")
    b.add_argument("--gains", type=float_list, default=DEFAULT_GAINS)
    b.add_argument("--scales", type=float_list, default=DEFAULT_SCALES)
    b.add_argument("--image-size", type=int, default=32)
    b.add_argument("--denoiser", help="denoiser checkpoint (diffusion mode)")
    b.set_defaults(func=cmd_build)

    t = sub.add_parser("train", parents=[common], help="train the denoiser or the scorer")
    t.add_argument("target", choices=["denoiser", "scorer"])
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--manifest", help="dataset manifest (required for the scorer)")
    t.add_argument("--loss-csv", help="loss curve path (default: <out>.loss.csv)")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--loss", choices=["softrank", "pairwise"], default="softrank")
    t.add_argument("--tau", type=float, default=TrainConfig.tau)
    t.add_argument("--batch-groups", type=int, default=TrainConfig.batch_groups)
    t.add_argument("--optimizer", choices=["sgd", "adam"], default=TrainConfig.optimizer)
    t.add_argument("--visual-only", type=parse_bool, nargs="?", const=True, default=False)
    t.add_argument("--references", type=int, default=480, help="procedural references for the denoiser")
    t.add_argument("--image-size", type=int, default=32)
    t.add_argument("--hidden", type=int, default=512)
    t.add_argument("--steps", type=int, default=50, help="diffusion steps T")
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--cond-drop", type=float, default=0.1)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="discrimination accuracy and rank correlations")
    e.add_argument("--manifest", required=True)
    src = e.add_mutually_exclusive_group()
    src.add_argument("--scorer", help="scorer checkpoint")
    src.add_argument("--oracle", action="store_true", help="score by ground-truth rank")
    src.add_argument("--random", action="store_true", help="uniform random scores")
    e.add_argument("--split", choices=["train", "test"], default="test")
    e.add_argument("--out", required=True, help="metrics CSV")
    e.add_argument("--levels-csv", help="per-level saturation/contrast/score CSV")
    e.add_argument("--categories-csv", help="per-category mean score CSV")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("refine", parents=[common], help="run guidance refinement over a seed grid")
    r.add_argument("--denoiser", required=True)
    r.add_argument("--scorer", required=True)
    r.add_argument("--modes", type=str_list, default=MODES)
    r.add_argument("--s0", type=float, default=7.5)
    r.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA)
    r.add_argument("--kappa", type=float, default=DEFAULT_KAPPA)
    r.add_argument("--seeds", type=int, default=8, help="seeds per condition, starting at --seed")
    r.add_argument("--conds", type=int_list, default=None, help="palette ids (default: all)")
    r.add_argument("--recompute-every", type=int, default=None)
    r.add_argument("--min-pass1-delta-sat", type=float, default=0.0,
                   help="summarize only jobs whose first-pass saturation gap reaches this value")
    r.add_argument("--out", required=True, help="per-job report CSV")
    r.add_argument("--summary", help="per-mode summary CSV (default: <out>.summary.csv)")
    r.add_argument("--images-dir", help="also write before/after PNGs here")
    r.set_defaults(func=cmd_refine)

    rp = sub.add_parser("report", parents=[common], help="render CSV outputs as SVG charts")
    rp.add_argument("csv", nargs="+")
    rp.add_argument("--out-dir")
    rp.set_defaults(func=cmd_report)

    s = sub.add_parser("score", parents=[common], help="print the scorer's value for one PNG")
    s.add_argument("image")
    s.add_argument("--palette-id", type=int, required=True)
    s.add_argument("--scorer", required=True)
    s.set_defaults(func=cmd_score)
    return parser


def read_config(path) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file not found: {p}")
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string("[config]\n" + p.read_text(encoding="utf-8"))
    except configparser.Error as exc:
        raise CliError(f"malformed config {p}: {exc}") from exc
    if cp.sections() != ["config"]:
        raise CliError(f"config {p} must be flat key = value lines without sections")
    return dict(cp["config"])


def apply_config(parser: argparse.ArgumentParser, argv: Sequence[str], config_path: str) -> None:
    """Install config-file values as defaults of the subcommand named in ``argv``."""
    choices = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in choices), None)
    if command is None:
        return
    subparser = choices[command]
    actions = {a.dest: a for a in subparser._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, value in read_config(config_path).items():
        dest = key.replace("-", "_")
        if dest == "lambda":
            dest = "lam"
        if dest not in actions:
            raise CliError(f"unknown config key {key!r} for command {command!r}")
        action = actions[dest]
        try:
            if action.type is not None:
                conv = action.type(value)
            elif action.const is True or action.nargs == 0:
                conv = parse_bool(value)
            else:
                conv = value
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise CliError(f"config key {key!r}: {exc}") from exc
        if action.choices is not None and conv not in action.choices:
            raise CliError(f"config key {key!r}: {conv!r} not in {list(action.choices)}")
        defaults[dest] = conv
    for a in subparser._actions:
        if a.required and a.dest in defaults:
            a.required = False
    subparser.set_defaults(**defaults)


def resolved_config(args) -> dict:
    skip = {"func", "config", "log_level"}
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in skip:
            continue
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    config_path = pre.parse_known_args(argv)[0].config
    try:
        if config_path:
            apply_config(parser, argv, config_path)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    args = parser.parse_args(argv)
    try:
        logging.basicConfig(level=args.log_level, stream=sys.stderr,
                            format="%(asctime)s %(levelname)s %(name)s: %(message)s")
        args.seed = resolve_seed(args.seed)
        if args.jobs < 1:
            raise CliError("jobs must be >= 1")
        if args.command == "train" and args.epochs is None:
            from .cfm_scorer import TrainConfig

            args.epochs = 150 if args.target == "denoiser" else TrainConfig.epochs
        if args.command == "train" and args.target == "scorer" and not args.manifest:
            raise CliError("training the scorer needs --manifest")
        log.info("resolved config: %s", json.dumps(resolved_config(args), sort_keys=True))
        return args.func(args)
    except (CliError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
