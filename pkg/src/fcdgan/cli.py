"""Command-line entry point: ``fcdgan <command> ...``.

Exit codes: 0 success, 1 validation error, 2 runtime failure (non-finite
loss, I/O). Relative output paths resolve under ``$FCDGAN_OUTPUT_ROOT``
when it is set. No command overwrites existing outputs without ``--force``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import KEYS, PRESETS, ConfigError, RunConfig, build_config, describe_keys, load_config
from .data import (
    BandStats,
    DatasetManifest,
    SampleRecord,
    TileGrid,
    band_stats,
    make_region_reference,
    make_wscd_dataset,
    normalize,
    sliding_crops,
    tile,
)
from .evaluation import (
    DEFAULT_THRESHOLDS,
    METRIC_KEYS,
    best_threshold,
    evaluate,
    render_density,
    render_error_map,
    plot_losses,
    save_png,
    threshold_sweep,
)
from .networks import CheckpointMismatch, load_checkpoint
from .raster_io import read_mask, read_raster, read_reference, write_mask, write_raster
from .training import NonFiniteLoss, PairSet, predict, train

log = logging.getLogger("fcdgan")

EPOCH_KEYS = ("gen_pretrain_epochs", "seg_pretrain_epochs", "joint_epochs", "adversarial_epochs", "supervised_epochs")


class UsageError(ValueError):
    """Bad command-line input; maps to exit code 1."""


def output_path(p: str | Path) -> Path:
    p = Path(p)
    root = os.environ.get("FCDGAN_OUTPUT_ROOT")
    return p if p.is_absolute() or not root else Path(root) / p


def _claim(path: Path, force: bool, is_dir: bool = False) -> Path:
    """Refuse to reuse an existing output unless ``force``; with force a directory is cleared."""
    if path.exists() and (not is_dir or any(path.iterdir())):
        if not force:
            raise UsageError(f"{path} already exists; pass --force to overwrite")
        if is_dir:
            shutil.rmtree(path)
    if is_dir:
        path.mkdir(parents=True, exist_ok=True)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _parse_sets(items: list[str] | None) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _thresholds(spec: str | None) -> tuple[float, ...]:
    if not spec:
        return DEFAULT_THRESHOLDS
    if ":" in spec:
        lo, hi, step = (float(p) for p in spec.split(":"))
        n = int(round((hi - lo) / step)) + 1
        return tuple(round(lo + i * step, 10) for i in range(n))
    return tuple(float(p) for p in spec.split(","))


# -- make-dataset -------------------------------------------------------------

def _read_pair(xp, yp):
    x, geo = read_raster(xp)
    y, _ = read_raster(yp)
    if x.shape != y.shape:
        raise UsageError(f"{xp} and {yp} differ in shape: {x.shape} vs {y.shape}")
    return x, y, geo


def cmd_make_dataset(args) -> int:
    n_x, n_y = len(args.x), len(args.y)
    if n_x != n_y:
        raise UsageError("give one --y per --x")
    refs = args.reference or []
    if args.mode != "uscd-tiles" and len(refs) != n_x:
        raise UsageError(f"{args.mode} needs one --reference per pair")
    for src in [*args.x, *args.y, *refs]:
        if not Path(src).is_file():
            raise FileNotFoundError(f"input raster not found: {src}")
    out = _claim(output_path(args.out), args.force, is_dir=True)
    records: list[SampleRecord] = []
    bands = None
    counter = changed = 0

    def put(x, y, geo, ref=None, region=None, label=None):
        nonlocal counter, changed
        stem = f"{counter:05d}"
        counter += 1
        changed += int(label == "changed" or (ref is not None and bool(ref.any())))
        rec = SampleRecord(f"x/{stem}.tif", f"y/{stem}.tif", label=label)
        write_raster(out / rec.x, x, geo)
        write_raster(out / rec.y, y, geo)
        if ref is not None:
            rec.pixel_ref = f"ref/{stem}.png"
            write_mask(out / rec.pixel_ref, ref)
        if region is not None:
            rec.region_ref = f"region/{stem}.png"
            write_mask(out / rec.region_ref, region)
        records.append(rec)

    for i in range(n_x):
        x, y, geo = _read_pair(args.x[i], args.y[i])
        if bands is not None and x.shape[0] != bands:
            raise UsageError("all pairs must share a band count")
        bands = x.shape[0]
        ref = None
        if i < len(refs):
            ref, _ = read_reference(refs[i])
            if ref.shape != x.shape[-2:]:
                raise UsageError(f"{refs[i]} is not aligned with {args.x[i]}")
        if args.mode == "wscd-slice":
            for s in make_wscd_dataset(x, y, ref, args.slice_size):
                put(s.x, s.y, None, s.reference, label=s.label)
        elif args.mode == "rscd-regions":
            put(x, y, geo, ref, make_region_reference(ref, args.expansion))
        else:
            grid = _grid(args.tile_size, args.context)
            tx, ty = tile(x, grid), tile(y, grid)
            rt = tile(ref.astype(np.uint8), grid) if ref is not None else None
            for k, ((a, _), (b, _)) in enumerate(zip(tx, ty)):
                put(a, b, None, rt[k][0] if rt is not None else None)
    if not records:
        raise UsageError("no samples derived; inputs smaller than one slice?")
    stats = None
    if args.normalization == "global":
        stats = band_stats([read_raster(out / r.x)[0] for r in records] + [read_raster(out / r.y)[0] for r in records])
    manifest = DatasetManifest(bands, records, args.normalization, stats)
    manifest.write(out / "manifest.json")
    print(f"wrote {len(records)} sample(s), {changed} changed, manifest {out / 'manifest.json'}")
    return 0


def _grid(size: int, context: int) -> TileGrid:
    return TileGrid(size, size - 2 * context, context)


# -- train --------------------------------------------------------------------

def _resolve_config(args) -> RunConfig:
    extra = _parse_sets(getattr(args, "set", None))
    if getattr(args, "manifest", None):
        extra["manifest"] = args.manifest
    if getattr(args, "output_dir", None):
        extra["output_dir"] = args.output_dir
    if getattr(args, "epochs_override", None) is not None:
        for k in EPOCH_KEYS:
            extra[k] = args.epochs_override
        extra["warmup_epochs"] = min(args.epochs_override, KEYS["warmup_epochs"].default)
    if args.config:
        return load_config(args.config, args.preset, extra)
    return build_config(extra, args.preset)


def load_training_data(cfg: RunConfig) -> tuple[dict, BandStats | None]:
    """Read the manifest's rasters, normalize them and build the regime's PairSets."""
    if not cfg["manifest"]:
        raise UsageError("no dataset manifest configured (key 'manifest' or --manifest)")
    manifest = DatasetManifest.read(cfg["manifest"])
    regime = cfg["regime"]
    manifest.validate_for(regime)
    if manifest.bands != cfg["bands"]:
        raise UsageError(f"manifest holds {manifest.bands}-band rasters, config expects {cfg['bands']}")
    xs, ys = [], []
    for rec in manifest.records:
        x, y, _ = _read_pair(manifest.resolve(rec.x), manifest.resolve(rec.y))
        xs.append(x)
        ys.append(y)
    stats = None
    scope = cfg["normalization"]
    if scope == "global":
        stats = manifest.stats or band_stats(xs + ys)
    xs = [normalize(r, stats, scope).astype(np.float32) for r in xs]
    ys = [normalize(r, stats, scope).astype(np.float32) for r in ys]

    if regime == "uscd":
        size, grid = cfg["crop_size"], cfg.grid
        px, py = [], []
        for x, y in zip(xs, ys):
            if size:
                stride = cfg["crop_stride"] or size
                px.append(sliding_crops(x, size, stride)[0])
                py.append(sliding_crops(y, size, stride)[0])
            elif x.shape[-2:] == (grid.input_size, grid.input_size):
                px.append(x[None])
                py.append(y[None])
            else:
                px.append(np.stack([t for t, _ in tile(x, grid)]))
                py.append(np.stack([t for t, _ in tile(y, grid)]))
        return {"pairs": PairSet(np.concatenate(px), np.concatenate(py))}, stats

    shapes = {x.shape for x in xs}
    if len(shapes) != 1:
        raise UsageError(f"{regime} training needs equally sized samples, found {sorted(shapes)}; slice them first")
    x, y = np.stack(xs), np.stack(ys)
    if regime == "wscd":
        lab = np.array([r.label == "changed" for r in manifest.records])
        return {"changed": PairSet(x[lab], y[lab]), "unchanged": PairSet(x[~lab], y[~lab])}, stats
    if regime == "rscd":
        region = np.stack([read_mask(manifest.resolve(r.region_ref)) for r in manifest.records]).astype(np.float32)
        return {"pairs": PairSet(x, y, region=region)}, stats
    ref = np.stack([read_reference(manifest.resolve(r.pixel_ref))[0] for r in manifest.records]).astype(np.float32)
    return {"pairs": PairSet(x, y, reference=ref)}, stats


def _write_run_config(out: Path, cfg: RunConfig, stats: BandStats | None):
    record = {"config": cfg.to_dict(), "stats": stats.to_dict() if stats else None}
    (out / "run_config.json").write_text(json.dumps(record, indent=2))


def cmd_train(args) -> int:
    cfg = _resolve_config(args)  # validation happens before any compute
    data, stats = load_training_data(cfg)
    out = _claim(output_path(cfg["output_dir"]), args.force, is_dir=True)
    _write_run_config(out, cfg, stats)
    report = train(cfg.train_config(), data, out)
    plot_losses(report, out / "plots")
    print(f"trained {cfg['regime']} in {report.wall_time:.1f}s; outputs in {out}")
    return 0


# -- predict / evaluate / sweep / render ----------------------------------------

def _run_settings(run_dir: Path) -> tuple[dict, BandStats | None, Path]:
    rc = json.loads((run_dir / "run_config.json").read_text())
    run = json.loads((run_dir / "run.json").read_text())
    ckpt = run["checkpoints"].get("segmentor")
    if ckpt is None:
        raise UsageError(f"{run_dir} holds no segmentor checkpoint")
    return rc["config"], BandStats.from_dict(rc["stats"]) if rc["stats"] else None, Path(ckpt)


def cmd_predict(args) -> int:
    if bool(args.run) == bool(args.checkpoint):
        raise UsageError("give exactly one of --run or --checkpoint")
    stats = None
    scope = args.normalization or "per_image"
    threshold, grid = args.threshold, None
    if args.run:
        config, stats, ckpt = _run_settings(Path(args.run))
        scope = args.normalization or config["normalization"]
        threshold = threshold if threshold is not None else config["threshold"]
        grid = build_config({k: config[k] for k in ("tile_input_size", "tile_core_size", "tile_context")}).grid
    else:
        ckpt = Path(args.checkpoint)
        if scope == "global":
            if not args.stats:
                raise UsageError("global normalization with --checkpoint needs --stats")
            stats = BandStats.from_dict(json.loads(Path(args.stats).read_text()))
    threshold = 0.5 if threshold is None else threshold
    x, y, geo = _read_pair(args.x, args.y)
    model, _ = load_checkpoint(ckpt, "segmentor")
    if model.bands != x.shape[0]:
        raise CheckpointMismatch(f"segmentor was built for {model.bands} bands, {args.x} has {x.shape[0]}")
    xn = normalize(x, stats, scope).astype(np.float32)
    yn = normalize(y, stats, scope).astype(np.float32)
    if grid is not None and min(x.shape[-2:]) < grid.core_size:
        grid = None  # smaller than one core: a single whole-image pass
    if args.no_tiling:
        grid = None
    prob_path = _claim(output_path(args.out + "_prob.tif"), args.force)
    mask_path = _claim(output_path(args.out + "_mask.png"), args.force)
    prob, binary = predict(model, xn, yn, grid, threshold)
    write_raster(prob_path, prob.astype(np.float32), geo)
    write_mask(mask_path, binary)
    print(f"wrote {prob_path} and {mask_path}")
    return 0


def _read_prob(path) -> np.ndarray:
    p = Path(path)
    a = np.load(p) if p.suffix == ".npy" else read_raster(p)[0][0]
    if a.min() < 0 or a.max() > 1:
        raise UsageError(f"{path}: probabilities must lie in [0, 1]")
    return a


def cmd_evaluate(args) -> int:
    prob = _read_prob(args.prob)
    ref, valid = read_reference(args.reference)
    if ref.shape != prob.shape:
        raise UsageError(f"reference {ref.shape} and map {prob.shape} differ in shape")
    report = evaluate(prob, ref, args.threshold, valid)
    text = report.to_json()
    if args.out:
        _claim(output_path(args.out), args.force).write_text(text)
    print("\t".join(METRIC_KEYS))
    print(report.row())
    if report.degenerate:
        print("degenerate: " + ", ".join(report.degenerate))
    return 0


def cmd_sweep(args) -> int:
    prob = _read_prob(args.prob)
    ref, valid = read_reference(args.reference)
    if ref.shape != prob.shape:
        raise UsageError(f"reference {ref.shape} and map {prob.shape} differ in shape")
    reports = threshold_sweep(prob, ref, _thresholds(args.thresholds), valid)
    lines = ["threshold\t" + "\t".join(METRIC_KEYS)] + [f"{r.threshold:g}\t{r.row()}" for r in reports]
    if args.out:
        _claim(output_path(args.out), args.force).write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    best = best_threshold(reports)
    print(f"best F1 {best.F1:.4f} at threshold {best.threshold:g}")
    return 0


def cmd_render(args) -> int:
    out = _claim(output_path(args.out), args.force)
    if args.kind == "error":
        if not (args.mask and args.reference):
            raise UsageError("error renders need --mask and --reference")
        ref, valid = read_reference(args.reference)
        img = render_error_map(read_mask(args.mask), ref, valid)
    else:
        if not (args.prob and args.base):
            raise UsageError("density renders need --prob and --base")
        img = render_density(_read_prob(args.prob), read_raster(args.base)[0], args.alpha)
    save_png(out, img)
    print(f"wrote {out}")
    return 0


# -- synth ----------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .experiment import case_summary, run_synthetic, synthetic_case_for

    overrides = _parse_sets(args.set)
    if args.epochs_override is not None:
        for k in EPOCH_KEYS:
            overrides[k] = args.epochs_override
        overrides["warmup_epochs"] = min(args.epochs_override, KEYS["warmup_epochs"].default)
    build_config({**overrides, "seed": args.seed}, preset=f"synthetic-{args.regime}")  # validate up front
    out = _claim(output_path(args.out or f"synth/{args.regime}-{args.seed}"), args.force, is_dir=True)
    case = synthetic_case_for(args.regime, args.seed)
    np.savez_compressed(out / "case.npz", x=case.x, y=case.y, reference=case.reference,
                        **({"regions": case.regions} if case.regions is not None else {}),
                        **({"labels": case.labels} if case.labels is not None else {}))
    (out / "case.json").write_text(json.dumps(case_summary(case), indent=2))
    print(f"generated {args.regime} case: {len(case)} pair(s), {len(case.changed)} changed")
    if not args.run:
        return 0
    res = run_synthetic(args.regime, args.seed, overrides, out / "run", case=case)
    plot_losses(res.report, out / "run" / "plots")
    ref = res.reference[0]
    save_png(out / "run" / "error_map_0.png", render_error_map((res.prob[0] >= res.metrics.threshold).astype(np.uint8), ref))
    base = case.x[0] if args.regime == "uscd" else case.test.x[0]
    save_png(out / "run" / "density_0.png", render_density(res.prob[0], base))
    summary = res.summary()
    print(json.dumps({k: v for k, v in summary.items() if k != "metrics"}))
    print(f"F1 {res.F1:.4f}")
    return 0


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fcdgan",
        description="Change detection with segmentor, generator and discriminator networks.",
        epilog=describe_keys() + "\n\npresets: " + ", ".join(PRESETS),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--version", action="version", version=f"fcdgan {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses")
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("make-dataset", help="derive a training dataset and manifest from source rasters")
    m.add_argument("--mode", required=True, choices=("wscd-slice", "rscd-regions", "uscd-tiles"))
    m.add_argument("--x", action="append", required=True, help="first-date raster (repeatable)")
    m.add_argument("--y", action="append", required=True, help="second-date raster (repeatable)")
    m.add_argument("--reference", action="append", help="pixel change reference (repeatable)")
    m.add_argument("--out", required=True, help="output directory")
    m.add_argument("--slice-size", type=int, default=200)
    m.add_argument("--expansion", type=int, default=10, help="region growth per side in pixels")
    m.add_argument("--tile-size", type=int, default=220)
    m.add_argument("--context", type=int, default=10)
    m.add_argument("--normalization", choices=("per_image", "global"), default="per_image")
    m.add_argument("--force", action="store_true")
    m.set_defaults(func=cmd_make_dataset)

    t = sub.add_parser("train", help="train one regime from a config file and/or preset",
                       epilog=describe_keys(), formatter_class=argparse.RawDescriptionHelpFormatter)
    t.add_argument("--config", help="flat YAML run config")
    t.add_argument("--preset", choices=sorted(PRESETS))
    t.add_argument("--manifest")
    t.add_argument("--output-dir")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    t.add_argument("--epochs-override", type=int, help="set every stage to this many epochs (smoke runs)")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="probability raster and binary mask for one pair")
    pr.add_argument("--run", help="training output directory")
    pr.add_argument("--checkpoint", help="segmentor checkpoint (.pt with .json sidecar)")
    pr.add_argument("--x", required=True)
    pr.add_argument("--y", required=True)
    pr.add_argument("--out", required=True, help="output prefix; writes <prefix>_prob.tif and <prefix>_mask.png")
    pr.add_argument("--threshold", type=float)
    pr.add_argument("--normalization", choices=("per_image", "global"))
    pr.add_argument("--stats", help="band statistics JSON for global normalization")
    pr.add_argument("--no-tiling", action="store_true", help="one whole-image pass instead of 220/200 tiles")
    pr.add_argument("--force", action="store_true")
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="OA, KC, Pre, Rec, F1, mIOU, cIOU at one threshold")
    e.add_argument("--prob", required=True, help="probability raster (.tif/.png) or .npy")
    e.add_argument("--reference", required=True)
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--out", help="write the report as JSON")
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="metrics over a threshold grid")
    s.add_argument("--prob", required=True)
    s.add_argument("--reference", required=True)
    s.add_argument("--thresholds", help="lo:hi:step or comma list (default 0.05:0.95:0.05)")
    s.add_argument("--out", help="write the table as TSV")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("render", help="error map (TP white, FP red, FN blue) or density overlay")
    r.add_argument("--kind", choices=("error", "density"), default="error")
    r.add_argument("--mask")
    r.add_argument("--reference")
    r.add_argument("--prob")
    r.add_argument("--base", help="raster shown under the density overlay")
    r.add_argument("--alpha", type=float, default=0.5)
    r.add_argument("--out", required=True)
    r.add_argument("--force", action="store_true")
    r.set_defaults(func=cmd_render)

    y = sub.add_parser("synth", help="generate a synthetic case and optionally train and score it")
    y.add_argument("--regime", required=True, choices=("uscd", "wscd", "rscd", "fscd"))
    y.add_argument("--seed", type=int, default=0)
    y.add_argument("--run", action="store_true", help="train, evaluate and print the final F1")
    y.add_argument("--out", help="output directory (default synth/<regime>-<seed>)")
    y.add_argument("--set", action="append", metavar="KEY=VALUE")
    y.add_argument("--epochs-override", type=int)
    y.add_argument("--force", action="store_true")
    y.set_defaults(func=cmd_synth)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, CheckpointMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NonFiniteLoss, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
