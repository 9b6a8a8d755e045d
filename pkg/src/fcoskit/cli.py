"""
Command-line entry point.

    fcoskit bpr        --mode {fcos,anchor} [--policy P] [--levels L] [--table]
    fcoskit ambiguity  [--center-sampling on|off] [--fpn on|off] [--sweep] [--preset crowdhuman]
    fcoskit evaluate   --detections FILE [--crowd-metrics] [--pr-curve FILE]
    fcoskit gradcheck  [--samples N] [--inject-sign-flip KERNEL]
    fcoskit synth      --scenes N --seed S [--crowd] --out-dir DIR
    fcoskit assign-dump --image-id ID

Settings come from a flat dotted-key JSON file (``--config``), then
``--set key=value`` overrides, then dedicated flags. Exit codes: 0 ok,
2 I/O or annotation-format error, 3 configuration error, 4 failed check.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from . import analysis, metrics, synth
from .anchors import AnchorConfig
from .assignment import AssignConfig, assign
from .geometry import ResizeSpec
from .ingestion import (
    AnnotationFormatError,
    Dataset,
    ReportTable,
    load_annotations,
    load_crowdhuman,
    load_detections,
    save_annotations,
    save_detections,
    write_report,
)
from .losses import LossConfig, gradcheck
from .postprocess import PostConfig

logger = logging.getLogger("fcoskit")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_CHECK = 0, 2, 3, 4

SECTIONS: dict[str, type] = {
    "resize": ResizeSpec,
    "assign": AssignConfig,
    "anchor": AnchorConfig,
    "loss": LossConfig,
    "post": PostConfig,
}

EXTRA_DEFAULTS: dict[str, Any] = {
    "data.annotations": "",
    "data.format": "coco",
    "data.box_key": "fbox",
    "data.detections": "",
    "run.resize": True,
    "run.workers": 1,
    "run.seed": 0,
}


class ConfigError(ValueError):
    pass


def default_config() -> dict[str, Any]:
    """Every accepted key with its default value."""
    out: dict[str, Any] = {}
    for prefix, cls in SECTIONS.items():
        inst = cls()
        for f in dataclasses.fields(cls):
            out[f"{prefix}.{f.name}"] = getattr(inst, f.name)
    out.update(EXTRA_DEFAULTS)
    return out


def _coerce(key: str, value: Any, default: Any) -> Any:
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                low = value.lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            if not isinstance(value, bool):
                raise ValueError(value)
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if isinstance(default, tuple) or (default is None and isinstance(value, (list, str))):
            if isinstance(value, str):
                value = json.loads(value) if value.strip().startswith("[") else value.split(",")
            if value is None:
                return None
            return tuple(float(v) for v in value)
        if isinstance(default, str):
            if not isinstance(value, str):
                raise ValueError(value)
            return value
        return value
    except (TypeError, ValueError, json.JSONDecodeError):
        raise ConfigError(f"bad value for {key}: {value!r}") from None


def load_config(path: str | None, overrides: Sequence[str] = ()) -> dict[str, Any]:
    """Defaults, then the JSON file, then ``key=value`` overrides. Unknown keys are rejected."""
    cfg = default_config()
    updates: list[tuple[str, Any]] = []
    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        updates.extend(data.items())
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        updates.append((k.strip(), v))
    for k, v in updates:
        if k not in cfg:
            raise ConfigError(f"unknown config key {k!r}")
        cfg[k] = _coerce(k, v, default_config()[k])
    return cfg


def section(cfg: dict[str, Any], prefix: str, **overrides: Any):
    """Instantiate one config dataclass from the flat dict."""
    cls = SECTIONS[prefix]
    kwargs = {f.name: cfg[f"{prefix}.{f.name}"] for f in dataclasses.fields(cls)}
    kwargs.update(overrides)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{prefix}: {e}") from e


def _help_epilog() -> str:
    lines = ["config keys (JSON file with flat dotted keys, or --set key=value):"]
    for k, v in default_config().items():
        lines.append(f"  {k} = {json.dumps(list(v) if isinstance(v, tuple) else v)}")
    lines.append("")
    lines.append("exit codes: 0 ok, 2 I/O or format error, 3 config error, 4 failed check")
    return "\n".join(lines)


def _add_common(p: argparse.ArgumentParser, annotations: bool = True) -> None:
    p.add_argument("--config", help="JSON config file with flat dotted keys")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--output", help="report file (.json or .csv)")
    if annotations:
        p.add_argument("--annotations", help="annotation file (overrides data.annotations)")
        p.add_argument("--format", choices=("coco", "crowdhuman"), help="annotation format")
        p.add_argument("--workers", type=int, help="worker processes")
        p.add_argument("--no-resize", action="store_true", help="grid at native resolution")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="fcoskit", description=__doc__, epilog=_help_epilog(), formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bpr", help="best possible recall", epilog=_help_epilog(), formatter_class=fmt)
    _add_common(p)
    p.add_argument("--mode", choices=("fcos", "anchor"), default="fcos")
    p.add_argument("--policy", choices=("none", "threshold", "all"), help="anchor low-quality policy")
    p.add_argument("--levels", default="fpn", help="'fpn', 'P4' or a list like 'P3,P4'")
    p.add_argument("--table", action="store_true", help="all five rows of the BPR comparison")
    p.add_argument("--check", action="store_true", help="exit 4 if the table misses its targets")

    p = sub.add_parser("ambiguity", help="ambiguous-sample ratios", epilog=_help_epilog(), formatter_class=fmt)
    _add_common(p)
    p.add_argument("--center-sampling", choices=("on", "off"))
    p.add_argument("--fpn", choices=("on", "off"), default="on")
    p.add_argument("--sweep", action="store_true", help="2x2 grid of sampling and FPN")
    p.add_argument("--preset", choices=("crowdhuman",), help="four-bucket crowd breakdown")
    p.add_argument("--buckets", type=int, default=3)
    p.add_argument("--check", action="store_true", help="exit 4 if the sweep misses its targets")

    p = sub.add_parser("evaluate", help="score detections", epilog=_help_epilog(), formatter_class=fmt)
    _add_common(p)
    p.add_argument("--detections", help="COCO results JSON")
    p.add_argument("--crowd-metrics", action="store_true", help="also report MR^-2 and JI")
    p.add_argument("--pr-curve", help="write per-threshold PR curve CSV")

    p = sub.add_parser("gradcheck", help="finite-difference gradient check", epilog=_help_epilog(), formatter_class=fmt)
    _add_common(p, annotations=False)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--seed", type=int)
    p.add_argument("--inject-sign-flip", choices=("focal", "giou_loss", "bce"))

    p = sub.add_parser("synth", help="synthetic fixtures", epilog=_help_epilog(), formatter_class=fmt)
    _add_common(p, annotations=False)
    p.add_argument("--scenes", type=int, default=10)
    p.add_argument("--seed", type=int)
    p.add_argument("--crowd", action="store_true")
    p.add_argument("--out-dir", default=".")

    p = sub.add_parser("assign-dump", help="per-location assignment CSV", epilog=_help_epilog(), formatter_class=fmt)
    _add_common(p)
    p.add_argument("--image-id", type=int, required=True)
    return parser


def _apply_flags(cfg: dict[str, Any], args: argparse.Namespace) -> None:
    if getattr(args, "annotations", None):
        cfg["data.annotations"] = args.annotations
    if getattr(args, "format", None):
        cfg["data.format"] = args.format
    if getattr(args, "workers", None) is not None:
        cfg["run.workers"] = args.workers
    if getattr(args, "no_resize", False):
        cfg["run.resize"] = False
    if getattr(args, "detections", None):
        cfg["data.detections"] = args.detections
    if getattr(args, "seed", None) is not None:
        cfg["run.seed"] = args.seed
    if cfg["run.workers"] < 1:
        raise ConfigError("run.workers must be >= 1")
    if cfg["data.format"] not in ("coco", "crowdhuman"):
        raise ConfigError(f"unknown data.format {cfg['data.format']!r}")


def _dataset(cfg: dict[str, Any]) -> Dataset:
    path = cfg["data.annotations"]
    if not path:
        raise ConfigError("no annotation file given (data.annotations or --annotations)")
    if cfg["data.format"] == "crowdhuman":
        return load_crowdhuman(path, box_key=cfg["data.box_key"])
    return load_annotations(path)


def _resize(cfg: dict[str, Any]) -> ResizeSpec | None:
    return section(cfg, "resize") if cfg["run.resize"] else None


def _emit(report, args: argparse.Namespace, text: str) -> None:
    print(text)
    if args.output:
        write_report(report, args.output)


def cmd_bpr(args: argparse.Namespace, cfg: dict[str, Any]) -> int:
    dataset = _dataset(cfg)
    rs = _resize(cfg)
    workers = cfg["run.workers"]
    fcos_cfg = section(cfg, "assign")
    if args.table:
        reports, outcomes = [], []
        for kind, policy, levels in analysis.BPR_ROWS:
            lv = analysis.LevelsConfig.from_names(levels, rs)
            if kind == "FCOS":
                rep = analysis.bpr_fcos(dataset, lv, fcos_cfg, workers)
            else:
                acfg = section(cfg, "anchor", low_quality_policy=policy)
                rep = analysis.bpr_anchor(dataset, lv, acfg, fcos_cfg.include_crowd, workers)
            reports.append(rep)
            key = (kind, policy, levels)
            outcomes.append(
                analysis.CheckOutcome(
                    rep.matching_rule, rep.bpr_percent, analysis.BPR_TARGETS[key], analysis.BPR_TOLERANCES[key]
                )
            )
        _emit(reports, args, analysis.format_bpr_table(reports))
        return _check_result(args.check, outcomes)
    lv = analysis.LevelsConfig.from_names(args.levels, rs)
    if args.mode == "fcos":
        rep = analysis.bpr_fcos(dataset, lv, fcos_cfg, workers)
    else:
        over = {"low_quality_policy": args.policy} if args.policy else {}
        rep = analysis.bpr_anchor(dataset, lv, section(cfg, "anchor", **over), fcos_cfg.include_crowd, workers)
    _emit(rep, args, analysis.format_bpr_table([rep]))
    return EXIT_OK


def _check_result(enabled: bool, outcomes: Sequence[analysis.CheckOutcome]) -> int:
    if not enabled:
        return EXIT_OK
    bad = [o for o in outcomes if not o.passed]
    for o in outcomes:
        status = "PASS" if o.passed else "FAIL"
        print(f"{status}  {o.name}: {o.value:.2f} (target {o.target:.2f} +/- {o.tolerance:g})")
    return EXIT_CHECK if bad else EXIT_OK


def cmd_ambiguity(args: argparse.Namespace, cfg: dict[str, Any]) -> int:
    dataset = _dataset(cfg)
    rs = _resize(cfg)
    workers = cfg["run.workers"]
    over = {}
    if args.center_sampling:
        over["center_sampling"] = args.center_sampling == "on"
    acfg = section(cfg, "assign", **over)
    if args.preset == "crowdhuman":
        rep = analysis.crowdhuman_ambiguity(dataset, rs, workers)
        _emit(rep, args, analysis.format_ambiguity_table([rep]))
        outcomes = [
            analysis.CheckOutcome(f"bucket {lab}", val, tgt, 1.0)
            for lab, val, tgt in zip(rep.labels[:2], rep.percentages[:2], analysis.CROWDHUMAN_TARGETS[:2])
        ]
        return _check_result(args.check, outcomes)
    if args.buckets < 2:
        raise ConfigError("--buckets must be >= 2")
    if args.sweep:
        reps = analysis.ambiguity_sweep(dataset, rs, acfg, args.buckets, workers)
        _emit(reps, args, analysis.format_ambiguity_table(reps))
        outcomes = []
        if args.buckets == 3:
            for rep in reps:
                targets = analysis.AMBIGUITY_TARGETS[(rep.center_sampling, rep.fpn)]
                for lab, val, tgt in zip(rep.labels, rep.percentages, targets):
                    name = f"sampling={rep.center_sampling} fpn={rep.fpn} bucket {lab}"
                    outcomes.append(analysis.CheckOutcome(name, val, tgt, 1.0))
        return _check_result(args.check, outcomes)
    fpn = args.fpn == "on"
    lv = analysis.LevelsConfig(resize=rs) if fpn else analysis.LevelsConfig((16,), None, rs)
    rep = analysis.ambiguity(dataset, lv, acfg, args.buckets, workers)
    _emit(rep, args, analysis.format_ambiguity_table([rep]))
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace, cfg: dict[str, Any]) -> int:
    dataset = _dataset(cfg)
    if not cfg["data.detections"]:
        raise ConfigError("no detection file given (data.detections or --detections)")
    dets = load_detections(cfg["data.detections"], dataset)
    result = metrics.coco_eval(dets, dataset)
    report = result.report
    if args.crowd_metrics:
        report.MR2 = metrics.mr2(dets, dataset)
        report.JI, report.ji_score_threshold = metrics.best_jaccard_index(dets, dataset)
    text = "\n".join(f"{k:<20} {v:.4f}" for k, v in report.as_dict().items() if v is not None)
    _emit(report, args, text)
    if args.pr_curve:
        rows = metrics.pr_curve_rows(result, dataset)
        cols = ["iou_threshold", "category_id", "recall", "precision"]
        write_report(ReportTable(cols, [[r[c] for c in cols] for r in rows]), args.pr_curve, "csv")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace, cfg: dict[str, Any]) -> int:
    if args.samples < 0:
        raise ConfigError("--samples must be >= 0")
    if args.samples == 0:
        logger.warning("gradcheck: 0 samples requested, nothing to check")
        print("gradcheck: no samples, nothing checked")
        return EXIT_OK
    results = gradcheck(
        samples=args.samples, seed=cfg["run.seed"], cfg=section(cfg, "loss"), flip_sign=args.inject_sign_flip
    )
    lines = [f"{'kernel':<10} {'samples':>8} {'failures':>9} {'max rel err':>12}  status"]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{r.kernel:<10} {r.samples:>8} {r.failures:>9} {r.max_rel_error:>12.3e}  {status}")
    _emit(results, args, "\n".join(lines))
    if all(r.passed for r in results):
        return EXIT_OK
    print("gradcheck FAILED: analytic gradients disagree with finite differences", file=sys.stderr)
    return EXIT_CHECK


def cmd_synth(args: argparse.Namespace, cfg: dict[str, Any]) -> int:
    if args.scenes < 0:
        raise ConfigError("--scenes must be >= 0")
    seed = cfg["run.seed"]
    dataset = synth.synth_dataset(args.scenes, seed, crowd=args.crowd)
    dets = synth.synth_detections(dataset, seed + 1)
    out = Path(args.out_dir)
    save_annotations(dataset, out / "annotations.json")
    save_detections(dets, out / "detections.json", dataset)
    print(f"wrote {args.scenes} scenes to {out}; mean pairwise IoU {synth.mean_pairwise_iou(dataset):.3f}")
    return EXIT_OK


DUMP_COLUMNS = [
    "level", "stride", "grid_x", "grid_y", "x", "y", "candidate_count",
    "slot", "source_object", "class_id", "l", "t", "r", "b", "centerness",
]


def assignment_table(dataset: Dataset, image_id: int, cfg: dict[str, Any]) -> ReportTable:
    try:
        image = dataset.image(image_id)
    except KeyError:
        raise ConfigError(f"image_id {image_id} not in the annotation file") from None
    lv = analysis.LevelsConfig(resize=_resize(cfg))
    image, levels = lv.prepare(image)
    res = assign(image, levels, section(cfg, "assign"))
    strides = res.strides()
    data = []
    for i in range(res.num_locations):
        for k in range(res.num_slots):
            reg = res.reg_target[i, k]
            pos = res.source_object[i, k] >= 0
            data.append(
                [
                    int(levels[res.level_index[i]].pyramid_level),
                    int(strides[i]),
                    int(res.grid_xy[i, 0]),
                    int(res.grid_xy[i, 1]),
                    float(res.points[i, 0]),
                    float(res.points[i, 1]),
                    int(res.candidate_count[i]),
                    k,
                    int(res.source_object[i, k]),
                    int(res.class_target[i, k]),
                    *(float(v) if pos else None for v in reg),
                    float(res.centerness_target[i, k]) if pos else None,
                ]
            )
    return ReportTable(list(DUMP_COLUMNS), data)


def cmd_assign_dump(args: argparse.Namespace, cfg: dict[str, Any]) -> int:
    table = assignment_table(_dataset(cfg), args.image_id, cfg)
    path = args.output or f"assign_{args.image_id}.csv"
    write_report(table, path, "csv")
    positives = sum(1 for r in table.data if r[8] >= 0)
    print(f"{len(table.data)} rows, {positives} positive; wrote {path}")
    return EXIT_OK


COMMANDS = {
    "bpr": cmd_bpr,
    "ambiguity": cmd_ambiguity,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
    "assign-dump": cmd_assign_dump,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        _apply_flags(cfg, args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, AnnotationFormatError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
