"""Command-line entry point: ``dbtkit <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .config import Config, load_config
from .dataset import (
    GROUPS,
    Volume,
    annotations_to_csv,
    load_annotations,
    load_cohort,
    load_predictions,
    load_volume,
    load_volume_index,
    predictions_to_csv,
    save_volume,
    split_cohort,
)
from .froceval import MatchCriteria, froc_curve, sensitivity_at
from .gridcodec import pad_to_grid
from .losses import loss_table
from .phantom import DetectorProfile, PhantomParams, generate_phantom_set, simulate_detector
from .postprocess import MergeRule, filter_by_breast_mask, postprocess_volume, ratio_nms
from .preprocess import preprocess_volume


class CliError(Exception):
    pass


def _default_seed() -> int:
    value = os.environ.get("DBTKIT_SEED")
    if value is None:
        return 0
    try:
        return int(value)
    except ValueError:
        raise CliError(f"DBTKIT_SEED must be an integer, got {value!r}") from None


def provenance(config: Config, seed: int | None = None) -> list[str]:
    lines = [f"dbtkit {__version__}", f"config {config.digest()}"]
    if seed is not None:
        lines.append(f"seed {seed}")
    overrides = config.overrides()
    if overrides:
        lines.append("overrides " + " ".join(f"{k}={v}" for k, v in sorted(overrides.items())))
    return lines


def _write(text: str, path: str | None):
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8", newline="")


def _save_volume(volume: Volume, path, prov: list[str]) -> Path:
    meta_path = save_volume(volume, path)
    d = json.loads(meta_path.read_text(encoding="utf-8"))
    d["provenance"] = prov
    meta_path.write_text(json.dumps(d, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return meta_path


def _write_volume_index(metas, path, prov: list[str]):
    doc = {"provenance": prov, "volumes": [asdict(m) for m in metas]}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _volume_stem(key) -> str:
    return "_".join(key)


def _parse_budgets(text: str) -> list[float]:
    try:
        budgets = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise CliError(f"bad --fp list {text!r}") from None
    if any(b < 0 for b in budgets):
        raise CliError("--fp budgets must be >= 0")
    return budgets


def _summary_lines(curve, budgets) -> list[str]:
    return [f"sensitivity@{b:g}fp,{sensitivity_at(curve, b)!r}" for b in budgets]


# ---------------------------------------------------------------------------
# subcommands


def cmd_phantom(args, config: Config) -> int:
    params = PhantomParams(slices=args.slices, rows=args.rows, cols=args.cols,
                           lesion_count=args.lesions, seed=args.seed)
    out = Path(args.out)
    prov = provenance(config, args.seed)
    phantoms = generate_phantom_set(args.volumes, params)
    lesions = []
    for volume, gts in phantoms:
        _save_volume(volume, out / "volumes" / _volume_stem(volume.meta.key), prov)
        lesions += gts
    _write(annotations_to_csv(lesions, prov), str(out / "gt.csv"))
    _write_volume_index([v.meta for v, _ in phantoms], out / "volumes.json", prov)
    print(f"wrote {len(phantoms)} volumes and {len(lesions)} lesions to {out}")
    return 0


def cmd_preprocess(args, config: Config) -> int:
    volume = load_volume(args.input)
    leveled, mask = preprocess_volume(volume, config.erosion_radius, not args.no_downscale,
                                      args.jobs)
    prov = provenance(config)
    _save_volume(leveled, args.out_volume, prov)
    _save_volume(Volume(leveled.meta, mask.astype(np.uint16)), args.out_mask, prov)
    return 0


def cmd_postprocess(args, config: Config) -> int:
    if len(args.grid) != len(args.mask):
        raise CliError("give one --mask per --grid")
    rule = MergeRule(config.max_score_ratio, config.min_iou)
    preds = []
    for grid_path, mask_path in zip(args.grid, args.mask):
        grids = np.load(grid_path)
        mask_volume = load_volume(mask_path)
        meta = mask_volume.meta
        if grids.ndim == 3:
            grids = grids[None]
        if grids.ndim != 4 or grids.shape[1] != 5:
            raise CliError(f"{grid_path}: expected a (slices, 5, rows, cols) array")
        _, spec = pad_to_grid(meta.rows, meta.cols, config.cell_size, config.anchor_size)
        if grids.shape[2:] != spec.shape:
            raise CliError(f"{grid_path}: grid {grids.shape[2:]} does not match {spec.shape} "
                           f"for a {meta.rows}x{meta.cols} image")
        preds += postprocess_volume(grids, mask_volume.voxels != 0, spec, meta.key,
                                    meta.scale_factor, config.score_threshold, rule)
    _write(predictions_to_csv(preds, provenance(config)), args.out)
    return 0


def cmd_eval(args, config: Config) -> int:
    preds = load_predictions(args.pred)
    gts = load_annotations(args.gt)
    volumes = load_volume_index(args.volumes)
    criteria = MatchCriteria(config.min_distance_px, config.z_fraction, args.diagonal_of)
    curve = froc_curve(preds, gts, volumes, criteria, unit=args.unit)
    budgets = _parse_budgets(args.fp)
    _write(curve.to_csv(provenance(config)), args.out)
    summary = "\n".join(_summary_lines(curve, budgets)) + "\n"
    # keep stdout a clean CSV when the curve goes there
    (sys.stderr if args.out in (None, "-") else sys.stdout).write(summary)
    if args.plot:
        from .plotting import plot_froc
        plot_froc({"": curve}, args.plot, budgets=budgets)
    return 0


def cmd_loss_table(args, config: Config) -> int:
    rows = loss_table(args.points, config.gamma, config.focal_threshold)
    lines = [f"# {h}\n" for h in provenance(config)]
    lines.append("p_t,bce,weighted_bce,focal,reduced_focal\n")
    lines += [",".join(repr(float(v)) for v in row) + "\n" for row in rows]
    _write("".join(lines), args.out)
    if args.plot:
        from .plotting import plot_losses
        plot_losses(rows, args.plot)
    return 0


def _parse_targets(args):
    if args.targets:
        targets = {}
        for item in args.targets:
            group, _, values = item.partition("=")
            if group not in GROUPS:
                raise CliError(f"--targets: unknown group {group!r}")
            try:
                targets[group] = tuple(int(v) for v in values.split(","))
            except ValueError:
                raise CliError(f"--targets: expected integer counts in {item!r}") from None
        return targets
    try:
        return tuple(float(v) for v in args.fractions.split(","))
    except ValueError:
        raise CliError(f"bad --fractions {args.fractions!r}") from None


def cmd_split(args, config: Config) -> int:
    entries = load_cohort(args.cohort)
    train, val, test = split_cohort(entries, _parse_targets(args), args.seed)
    lines = [f"# {h}\n" for h in provenance(config, args.seed)]
    lines.append("patient_id,subset\n")
    for name, ids in (("train", train), ("val", val), ("test", test)):
        lines += [f"{p},{name}\n" for p in ids]
    _write("".join(lines), args.out)
    print(f"train {len(train)}  val {len(val)}  test {len(test)}", file=sys.stderr)
    return 0


def run_all(out: Path, seed: int, config: Config, n_volumes: int = 100, lesions: int = 2,
            profile: DetectorProfile = DetectorProfile(), jobs: int = 1,
            params: PhantomParams | None = None) -> dict:
    """Phantom -> preprocess -> simulated detector -> postprocess -> FROC."""
    params = params or PhantomParams(lesion_count=lesions, seed=seed)
    prov = provenance(config, seed)
    phantoms = generate_phantom_set(n_volumes, params)
    volumes = [v for v, _ in phantoms]
    gts = [g for _, lesion_list in phantoms for g in lesion_list]

    def prep(v):
        return preprocess_volume(v, config.erosion_radius, True)[1]

    with ThreadPoolExecutor(max(1, jobs)) as ex:
        masks = dict(zip((v.meta.key for v in volumes), ex.map(prep, volumes)))

    metas = [v.meta for v in volumes]
    criteria = MatchCriteria(config.min_distance_px, config.z_fraction)
    raw = simulate_detector(gts, metas, profile, seed, criteria, masks, mask_scale=2)

    rule = MergeRule(config.max_score_ratio, config.min_iou)
    preds = []
    for meta in metas:
        mine = [p for p in raw if p.volume_key == meta.key and p.score >= config.score_threshold]
        # filter on the downscaled mask grid, report in original pixels
        scaled = [type(p)(p.volume_key, p.box.scaled(0.5), p.center_slice, p.score, 2) for p in mine]
        kept = ratio_nms(filter_by_breast_mask(scaled, masks[meta.key]), rule)
        preds += [p.to_original() for p in kept]

    curve = froc_curve(preds, gts, metas, criteria, unit="volume")
    breast = froc_curve(preds, gts, metas, criteria, unit="breast")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write(annotations_to_csv(gts, prov), str(out / "gt.csv"))
        _write(predictions_to_csv(preds, prov), str(out / "pred.csv"))
        _write_volume_index(metas, out / "volumes.json", prov)
        _write(curve.to_csv(prov), str(out / "froc_volume.csv"))
        _write(breast.to_csv(prov), str(out / "froc_breast.csv"))
        from .plotting import plot_froc
        plot_froc({"per volume": curve}, out / "froc_volume.png")
        plot_froc({"per breast": breast}, out / "froc_breast.png")
    final = curve.points[-1]
    return {"curve": curve, "breast_curve": breast, "predictions": preds, "lesions": gts,
            "sensitivity": final.sensitivity, "avg_fp": final.avg_fp}


def cmd_run_all(args, config: Config) -> int:
    profile = DetectorProfile(tp_rate=args.tp_rate, fp_per_volume=args.fp_per_volume)
    result = run_all(Path(args.out), args.seed, config, args.volumes, args.lesions, profile,
                     args.jobs)
    lines = [f"lesions,{len(result['lesions'])}",
             f"predictions,{len(result['predictions'])}",
             f"sensitivity_at_lowest_threshold,{result['sensitivity']!r}",
             f"avg_fp_at_lowest_threshold,{result['avg_fp']!r}"]
    lines += _summary_lines(result["curve"], [1.0, 2.0])
    text = "".join(f"# {h}\n" for h in provenance(config, args.seed)) + "\n".join(lines) + "\n"
    _write(text, str(Path(args.out) / "summary.csv"))
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dbtkit", description=__doc__)
    parser.add_argument("--version", action="version", version=f"dbtkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file (default: built-in constants)")
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                        help="worker threads (default: logical cores)")
    seeded = argparse.ArgumentParser(add_help=False)
    seeded.add_argument("--seed", type=int, default=None,
                        help="random seed (default: $DBTKIT_SEED or 0)")

    p = sub.add_parser("phantom", parents=[common, seeded], help="write synthetic volumes + GT CSV")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--volumes", type=int, default=8)
    p.add_argument("--lesions", type=int, default=1, help="lesions per volume")
    p.add_argument("--slices", type=int, default=16)
    p.add_argument("--rows", type=int, default=384)
    p.add_argument("--cols", type=int, default=256)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("preprocess", parents=[common], help="window-level, downscale, breast mask")
    p.add_argument("input", help="volume sidecar (.json) or raw path")
    p.add_argument("--out-volume", required=True)
    p.add_argument("--out-mask", required=True)
    p.add_argument("--erosion-radius", type=int, default=None)
    p.add_argument("--no-downscale", action="store_true")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("postprocess", parents=[common],
                       help="grid outputs + breast mask -> prediction CSV")
    p.add_argument("--grid", action="append", required=True,
                   help=".npy array (slices, 5, rows, cols); repeat per volume")
    p.add_argument("--mask", action="append", required=True,
                   help="mask volume from `preprocess`; one per --grid")
    p.add_argument("--out", default=None, help="prediction CSV (default: stdout)")
    p.add_argument("--score-threshold", type=float, default=None)
    p.add_argument("--max-ratio", type=float, default=None)
    p.add_argument("--min-iou", type=float, default=None)
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("eval", parents=[common], help="FROC evaluation")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--volumes", required=True, help="JSON list of volume metadata")
    p.add_argument("--unit", choices=("volume", "breast", "slice"), default="volume")
    p.add_argument("--fp", default="1,2,3,4", help="comma-separated FP budgets")
    p.add_argument("--diagonal-of", choices=("gt", "pred"), default="gt")
    p.add_argument("--out", default=None, help="FROC CSV (default: stdout)")
    p.add_argument("--plot", default=None, help="also render the FROC curve to this image file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("loss-table", parents=[common], help="objectness loss curves as CSV")
    p.add_argument("--points", type=int, default=99)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--threshold", type=float, default=None, help="reduced focal knee")
    p.add_argument("--out", default=None)
    p.add_argument("--plot", default=None, help="also render the curves to this image file")
    p.set_defaults(func=cmd_loss_table)

    p = sub.add_parser("split", parents=[common, seeded], help="patient-level cohort split")
    p.add_argument("--cohort", required=True, help="JSON list of cohort entries")
    p.add_argument("--fractions", default="0.6,0.2,0.2", help="train,val,test proportions")
    p.add_argument("--targets", action="append", metavar="GROUP=TRAIN,VAL,TEST",
                   help="per-group patient counts; overrides --fractions")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("run-all", parents=[common, seeded], help="phantom -> FROC smoke pipeline")
    p.add_argument("--out", default="run-all-out")
    p.add_argument("--volumes", type=int, default=100)
    p.add_argument("--lesions", type=int, default=2, help="lesions per volume")
    p.add_argument("--tp-rate", type=float, default=0.7)
    p.add_argument("--fp-per-volume", type=float, default=2.0)
    p.set_defaults(func=cmd_run_all)
    return parser


FLAG_TO_CONFIG = {
    "erosion_radius": "erosion_radius",
    "score_threshold": "score_threshold",
    "max_ratio": "max_score_ratio",
    "min_iou": "min_iou",
    "gamma": "gamma",
    "threshold": "focal_threshold",
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        config = load_config(args.config)
        changes = {field: getattr(args, flag) for flag, field in FLAG_TO_CONFIG.items()
                   if getattr(args, flag, None) is not None}
        config = config.replace(**changes)
        if hasattr(args, "seed") and args.seed is None:
            args.seed = _default_seed()
        if args.jobs < 1:
            raise CliError("--jobs must be >= 1")
        return args.func(args, config)
    except (CliError, ValueError, OSError, RuntimeError) as e:
        print(f"dbtkit: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
