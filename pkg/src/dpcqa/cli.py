"""Command-line entry point: synth, train, score, eval, analyze.

Exit codes: 0 success, 2 usage, 3 numerical abort, 4 IO or parse failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .config import Config
from .data import (
    ARTEFACTS,
    ImageFormatError,
    encode_pnm,
    load_dataset,
    load_patch,
    read_manifest,
    synth_dataset,
    to_bytes,
    write_dataset,
)
from .fusion import QualityReport, slide_score
from .metrics import BIN_NAMES, UndefinedCorrelation, bin_group_analysis, plcc, srcc
from .training import TrainingAborted, load_model, train

logger = logging.getLogger("dpcqa")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

RESOLVED_CONFIG = "resolved_config.json"
SCORE_FIELDS = ("patch_id", "s_stain", "s_nuc", "s_mem", "usable")
SLIDE_ROW = "__slide__"
ANALYZE_FIELDS = ("patch_id", "score", "metric_name", "metric_value")
SCORE_BATCH = 16


class UsageError(Exception):
    pass


class ParseError(Exception):
    pass


# -- config plumbing ------------------------------------------------------------------------

_ABLATIONS = {
    "no_wcg": "use_wcg",
    "no_aggr_rwkv": "use_aggr_rwkv",
    "no_cross_attention": "use_cross_attention",
    "no_l_diff": "use_l_diff",
    "no_l_wavelet": "use_l_wavelet",
    "no_l_aggr": "use_l_aggr",
}
_OVERRIDES = {"seed": "seed", "epochs": "max_epochs", "batch": "batch_size", "lr": "lr", "threshold": "threshold"}


def read_config_file(path) -> Config:
    """Load a flat config JSON; a ``run`` section written by this tool is ignored."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ParseError(f"{path}: config must be a JSON object")
    data.pop("run", None)
    try:
        return Config.from_dict(data)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: {exc}") from exc


def resolve_config(args, base: Config | None = None) -> Config:
    cfg = base if base is not None else Config()
    if getattr(args, "config", None):
        cfg = read_config_file(args.config)
    updates = {}
    for flag, key in _OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            updates[key] = value
    for flag, key in _ABLATIONS.items():
        if getattr(args, flag, False):
            updates[key] = False
    try:
        return cfg.updated(updates)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def write_resolved(out: Path, cfg: Config, run: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / RESOLVED_CONFIG
    payload = {**cfg.to_dict(), "run": run}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def _fmt(x: float) -> str:
    return f"{x:.9f}"


# -- subcommands ------------------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.n < 10:
        raise UsageError("--n must be at least 10")
    cfg = resolve_config(args)
    out = Path(args.out)
    ds = synth_dataset(cfg.train.seed, args.n, radius=cfg.model.dilation_radius)
    manifest = write_dataset(ds, out)
    write_resolved(out, cfg, {"command": "synth", "n": args.n})
    print(f"manifest: {manifest}")
    severities = np.array([1.0 - p.s_star for p in ds.patches])
    counts, edges = np.histogram(severities, bins=10, range=(0.0, 1.0))
    print("severity histogram:")
    for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
        print(f"  [{lo:.1f}, {hi:.1f}{']' if hi == 1.0 else ')'} {c:4d} {'#' * int(c)}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    entries, patches = load_dataset(args.data, radius=cfg.model.dilation_radius)
    train_set = [patches[e.patch_id] for e in entries if e.split == "train"]
    val_set = [patches[e.patch_id] for e in entries if e.split == "val"]
    if not train_set or not val_set:
        raise UsageError("manifest needs nonempty train and val splits")
    if args.resume:
        _check_resume(args.resume, cfg)
    write_resolved(out, cfg, {"command": "train", "data": str(args.data), "resume": args.resume})
    result = train(train_set, val_set, cfg, out_dir=out, resume=args.resume)
    print(f"best epoch {result.best_epoch} val L1 {result.best_val:.6f}")
    print(f"checkpoint: {out / 'best.ckpt'}")
    return EXIT_OK


def _check_resume(path, cfg: Config) -> None:
    _, meta = load_checkpoint(path)
    saved = dict(meta.get("config", {}))
    current = cfg.to_dict()
    # the epoch budget may be extended on resume; everything else must match
    saved.pop("max_epochs", None)
    current.pop("max_epochs", None)
    if saved != current:
        diff = sorted(k for k in set(saved) | set(current) if saved.get(k) != current.get(k))
        raise UsageError(f"resume checkpoint config differs in {diff}")


def _score_threads() -> int:
    raw = os.environ.get("DPCQA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"DPCQA_THREADS must be an integer, got {raw!r}") from None
    return max(n, 1)


def cmd_score(args) -> int:
    model, ckpt_cfg = load_model(args.checkpoint)
    cfg = resolve_config(args, base=ckpt_cfg)
    threshold = cfg.train.threshold
    src = Path(args.input)
    if not src.is_dir():
        raise FileNotFoundError(f"input directory {src} not found")
    out = Path(args.out)
    write_resolved(out, cfg, {"command": "score", "checkpoint": str(args.checkpoint), "input": str(src)})

    inputs, skipped = [], []
    for path in sorted(src.glob("*.ppm")):
        pid = path.stem
        try:
            patch = load_patch(src, pid, cfg.model.dilation_radius)
            inputs.append(model.prepare(patch.image, patch.masks, pid))
        except (ImageFormatError, ValueError, OSError) as exc:
            warnings.warn(f"skipping {path.name}: {exc}", stacklevel=1)
            logger.warning("skipping %s: %s", path.name, exc)
            skipped.append(pid)

    # consecutive patches of one size form a batch
    batches: list[list] = []
    for inp in inputs:
        if batches and len(batches[-1]) < SCORE_BATCH and batches[-1][0].image.shape == inp.image.shape:
            batches[-1].append(inp)
        else:
            batches.append([inp])
    with ThreadPoolExecutor(max_workers=_score_threads()) as pool:
        results = list(pool.map(model.predict, batches))

    reports, heatmaps = [], []
    for batch, res in zip(batches, results):
        for i, inp in enumerate(batch):
            reports.append(QualityReport.build(inp.patch_id, res["s_stain"][i], res["s_nuc"][i], res["s_mem"][i], threshold))
            heatmaps.append((inp.patch_id, res["attention"][i].reshape(res["grid"])))

    scores_path = out / "scores.csv"
    with open(scores_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SCORE_FIELDS)
        for r in reports:
            writer.writerow([r.patch_id, _fmt(r.s_stain), _fmt(r.s_nuc), _fmt(r.s_mem), int(r.usable)])
        if reports:
            slide = slide_score([r.s_stain for r in reports])
            nuc = slide_score([r.s_nuc for r in reports])
            mem = slide_score([r.s_mem for r in reports])
            writer.writerow([SLIDE_ROW, _fmt(slide), _fmt(nuc), _fmt(mem), int(slide >= threshold)])
    if args.heatmaps:
        hm_dir = out / "heatmaps"
        hm_dir.mkdir(exist_ok=True)
        for pid, attn in heatmaps:
            (hm_dir / f"{pid}.attn.pgm").write_bytes(encode_pnm(to_bytes(attn)))
        # slide overview: one pixel per patch in scores.csv row order
        (hm_dir / f"{SLIDE_ROW}.s_stain.pgm").write_bytes(encode_pnm(to_bytes(slide_grid([r.s_stain for r in reports]))))
    print(f"scored {len(reports)} patches, skipped {len(skipped)}")
    if reports:
        print(f"slide score {slide:.6f}")
    print(f"scores: {scores_path}")
    return EXIT_OK


def slide_grid(values) -> np.ndarray:
    """Lay patch values row-major on a near-square grid; unused cells stay 0."""
    values = np.asarray(values, dtype=np.float64)
    cols = max(int(np.ceil(np.sqrt(values.size))), 1)
    rows = max(-(-values.size // cols), 1)
    grid = np.zeros(rows * cols)
    grid[: values.size] = values
    return grid.reshape(rows, cols)


def read_scores(path) -> dict[str, dict[str, float]]:
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(SCORE_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ParseError(f"{path}: missing columns {sorted(missing)}")
        for line, row in enumerate(reader, start=2):
            if row["patch_id"] == SLIDE_ROW:
                continue
            try:
                rows[row["patch_id"]] = {k: float(row[k]) for k in ("s_stain", "s_nuc", "s_mem")}
            except (TypeError, ValueError) as exc:
                raise ParseError(f"{path}:{line}: {exc}") from exc
    return rows


def eval_report(scores: dict, entries, threshold: float, split: str | None = None) -> dict:
    """PLCC/SRCC against s_star and per-artefact detection accuracy."""
    joined = [(scores[e.patch_id], e) for e in entries if e.patch_id in scores and (split is None or e.split == split)]
    if len(joined) < 3:
        raise ParseError(f"only {len(joined)} patches joined between scores and manifest; need 3")
    pred = [s["s_stain"] for s, _ in joined]
    ref = [e.s_star for _, e in joined]
    report = {"n": len(joined), "plcc": plcc(pred, ref), "srcc": srcc(pred, ref)}
    # a score below the threshold flags the artefact
    source = {"staining": "s_stain", "membrane": "s_mem", "nucleus": "s_nuc"}
    for art in ARTEFACTS:
        hits = [(s[source[art]] < threshold) == (art in e.labels) for s, e in joined]
        report[f"accuracy_{art}"] = sum(hits) / len(hits)
    return report


def format_eval(report: dict) -> str:
    lines = [f"n {report['n']}"]
    lines += [f"{k} {report[k]:.6f}" for k in report if k != "n"]
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    manifest = Path(args.manifest)
    if manifest.is_dir():
        manifest = manifest / "manifest.csv"
    scores = read_scores(args.scores)
    try:
        entries = read_manifest(manifest)
    except (KeyError, ValueError) as exc:
        raise ParseError(str(exc)) from exc
    report = eval_report(scores, entries, cfg.train.threshold, args.split)
    text = format_eval(report)
    out = Path(args.out)
    write_resolved(out, cfg, {"command": "eval", "scores": str(args.scores), "manifest": str(manifest), "split": args.split})
    (out / "eval_report.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def read_paired_csv(path) -> dict[str, tuple[list[float], list[float]]]:
    """metric_name -> (scores, values), in first-appearance order."""
    groups: dict[str, tuple[list[float], list[float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != ANALYZE_FIELDS:
            raise ParseError(f"{path}:1: header must be {','.join(ANALYZE_FIELDS)}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(ANALYZE_FIELDS):
                raise ParseError(f"{path}:{line}: expected {len(ANALYZE_FIELDS)} fields, got {len(row)}")
            _, score, name, value = row
            try:
                s, v = float(score), float(value)
            except ValueError:
                raise ParseError(f"{path}:{line}: score and metric_value must be numbers") from None
            if not (np.isfinite(s) and np.isfinite(v)) or not 0.0 <= s <= 1.0:
                raise ParseError(f"{path}:{line}: score must lie in [0, 1] and values must be finite")
            if not name:
                raise ParseError(f"{path}:{line}: empty metric_name")
            scores, values = groups.setdefault(name, ([], []))
            scores.append(s)
            values.append(v)
    if not groups:
        raise ParseError(f"{path}: no data rows")
    return groups


def cmd_analyze(args) -> int:
    cfg = resolve_config(args)
    groups = read_paired_csv(args.pairs)
    out = Path(args.out)
    write_resolved(out, cfg, {"command": "analyze", "pairs": str(args.pairs)})
    fields = ("metric", "n", "rho", "p", *BIN_NAMES, "kw_h", "kw_p")
    rows, notes = [], []
    for name, (scores, values) in groups.items():
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            try:
                rep = bin_group_analysis(scores, values)
            except UndefinedCorrelation as exc:
                raise ParseError(f"metric {name}: {exc}") from exc
        notes += [f"{name}: {w}" for w in rep.warnings]
        rows.append([name, rep.n, f"{rep.rho:.6f}", f"{rep.rho_p:.3e}", *(f"{m:.6f}" for m in rep.medians), f"{rep.kw_h:.6f}", f"{rep.kw_p:.3e}"])
    with open(out / "analysis.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        writer.writerows(rows)
    widths = [max(len(str(r[i])) for r in [fields, *rows]) for i in range(len(fields))]
    table = [" ".join(str(c).rjust(w) for c, w in zip(r, widths)) for r in [fields, *rows]]
    text = "\n".join(table + [f"warning: {n}" for n in notes]) + "\n"
    (out / "analysis.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    common.add_argument("--config", metavar="PATH", help="flat JSON config; flags override it")
    common.add_argument("--seed", type=int, metavar="N")
    common.add_argument("--out", required=True, metavar="DIR")

    parser = argparse.ArgumentParser(prog="dpcqa", description="Dual-stream quality scoring for stained tissue patches.", allow_abbrev=False)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], allow_abbrev=False, help="generate a synthetic dataset")
    p.add_argument("--n", type=int, default=200, metavar="N")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], allow_abbrev=False, help="train on a dataset directory")
    p.add_argument("data", help="dataset directory with manifest.csv")
    p.add_argument("--epochs", type=int, metavar="N")
    p.add_argument("--batch", type=int, metavar="N")
    p.add_argument("--lr", type=float, metavar="F")
    p.add_argument("--threshold", type=float, metavar="F")
    for flag in _ABLATIONS:
        p.add_argument("--" + flag.replace("_", "-"), dest=flag, action="store_true")
    p.add_argument("--resume", metavar="PATH", help="continue from a last.ckpt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", parents=[common], allow_abbrev=False, help="score every .ppm patch in a directory")
    p.add_argument("checkpoint")
    p.add_argument("input", help="directory of {id}.ppm with optional {id}.mask.pgm")
    p.add_argument("--heatmaps", action="store_true", help="write attention maps as PGM")
    p.add_argument("--threshold", type=float, metavar="F")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", parents=[common], allow_abbrev=False, help="correlate scores with manifest references")
    p.add_argument("scores", help="scores.csv from the score command")
    p.add_argument("manifest", help="manifest.csv or its dataset directory")
    p.add_argument("--split", choices=("train", "val", "test"), help="restrict to one split")
    p.add_argument("--threshold", type=float, metavar="F")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", parents=[common], allow_abbrev=False, help="bin and correlate downstream metrics")
    p.add_argument("pairs", help="CSV with patch_id,score,metric_name,metric_value")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (TrainingAborted, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ParseError, ImageFormatError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK
