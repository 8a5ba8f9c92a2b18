"""Command-line interface: align, explain, aggregate, evaluate, folds.

Every run resolves its configuration (flags over an optional key=value
config file over defaults), persists it next to the outputs, and exits 0
only when the full artifact set was produced. Seeds default to a fixed
constant so default runs reproduce byte-for-byte.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import atlas, evalharness, facealign, gateway, imaging, report
from .lime import LimeParams, explain_lime
from .rise import RiseParams, explain_rise
from .segmentation import slic

DEFAULT_SEED = 1234

_ORACLE_HELP = (
    "built-in oracle: 'mean-brightness', 'region-indicator:MASK.png', "
    "'linear-weights:FIELD.xhm1', or 'face-parts' (per-image masks from landmarks)"
)


def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected W,H - got {text!r}")
    return w, h


def _load_config_file(path: str) -> dict[str, str]:
    cfg = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise SystemExit(f"config line without '=': {line!r}")
        key, value = line.split("=", 1)
        cfg[key.strip().replace("-", "_")] = value.strip()
    return cfg


def _write_resolved_config(out_dir: Path, args: argparse.Namespace) -> None:
    skip = {"config", "func"}
    lines = []
    for key in sorted(vars(args)):
        if key in skip:
            continue
        value = getattr(args, key)
        if value is None:
            continue
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key}={value}")
    (out_dir / "run.config").write_text("\n".join(lines) + "\n")


def _default_oracle_classes(kind: str) -> list[str]:
    return {
        "mean-brightness": ["bright", "dark"],
        "region-indicator": ["region", "background"],
        "linear-weights": ["weighted", "rest"],
        "face-parts": ["angry", "happy", "sad"],
    }[kind]


def _parse_oracle_arg(text: str) -> tuple[str, str | None]:
    kind, _, param = text.partition(":")
    known = gateway.ORACLE_KINDS + ("face-parts", "face-part")
    if kind not in known:
        raise SystemExit(f"unknown oracle {kind!r}; expected one of {known}")
    if kind == "face-part" and param not in facealign.FACE_PARTS:
        raise SystemExit(f"face-part oracle needs a part name from {facealign.FACE_PARTS}")
    return kind, param or None


def _build_static_oracle(kind: str, param: str | None, classes: list[str],
                         input_size: tuple[int, int]) -> gateway.Classifier:
    spec = gateway.OracleSpec(kind=kind)
    if kind == "region-indicator":
        if not param:
            raise SystemExit("region-indicator oracle needs a mask PNG: region-indicator:MASK.png")
        spec.masks = [imaging.read_png(param) > 0.5]
    elif kind == "linear-weights":
        if not param:
            raise SystemExit("linear-weights oracle needs a field: linear-weights:FIELD.xhm1")
        spec.weights = imaging.read_xhm1(param)
    return gateway.make_oracle(spec, classes, input_size)


def _face_parts_oracle(points: np.ndarray, classes: list[str],
                       input_size: tuple[int, int], part: str | None = None) -> gateway.Classifier:
    """Per-image oracle keyed to landmark-relative regions.

    With `part` unset, one part per class (normalized scores); with a part
    name, a two-class indicator for that part alone.
    """
    w, h = input_size
    masks = facealign.part_masks(points, (h, w))
    if part is not None:
        spec = gateway.OracleSpec(kind="region-indicator", masks=[masks[part]])
    else:
        order = [facealign.FACE_PARTS[i % len(facealign.FACE_PARTS)] for i in range(len(classes))]
        spec = gateway.OracleSpec(kind="region-indicator", masks=[masks[p] for p in order])
    return gateway.make_oracle(spec, classes, input_size)


def _open_classifier(args, input_size: tuple[int, int]) -> gateway.Classifier:
    if args.backend:
        return gateway.SubprocessClassifier(args.backend, batch_size=args.batch_size)
    kind, param = _parse_oracle_arg(args.oracle)
    if kind == "face-parts":
        raise SystemExit("the face-parts oracle is built per image; this command handles it internally")
    classes = args.classes.split(",") if args.classes else _default_oracle_classes(kind)
    return _build_static_oracle(kind, param, classes, input_size)


# ---------------------------------------------------------------------------
# align
# ---------------------------------------------------------------------------


def cmd_align(args) -> int:
    manifest = evalharness.load_manifest(args.manifest)
    if len(manifest) == 0:
        print("error: no entries in manifest", file=sys.stderr)
        return 1
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    aligned_entries = []
    skipped = []
    for entry in manifest.entries:
        stem = Path(entry.image).stem
        try:
            if not entry.landmarks:
                raise facealign.LandmarkError("row has no landmark path")
            img = imaging.read_png(entry.image)
            pts = facealign.parse_pts(entry.landmarks)
            result = facealign.align_face(img, pts, out_side=args.side, margin=args.margin)
            imaging.write_png(out_dir / f"{stem}.png", result.image)
            facealign.write_pts(out_dir / f"{stem}.pts", result.landmarks)
            aligned_entries.append(evalharness.ManifestEntry(
                image=str(out_dir / f"{stem}.png"), label=entry.label,
                landmarks=str(out_dir / f"{stem}.pts")))
        except (OSError, ValueError) as exc:
            skipped.append({"image": entry.image, "reason": f"{type(exc).__name__}: {exc}"})

    summary = {"total": len(manifest), "aligned": len(aligned_entries), "skipped": skipped}
    (out_dir / "align_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    if aligned_entries:
        evalharness.save_manifest(out_dir / "aligned_manifest.csv",
                                  evalharness.DatasetManifest(entries=aligned_entries,
                                                              classes=manifest.classes))
    _write_resolved_config(out_dir, args)
    print(f"aligned {len(aligned_entries)}/{len(manifest)} faces -> {out_dir}")
    return 0 if aligned_entries else 1


# ---------------------------------------------------------------------------
# explain
# ---------------------------------------------------------------------------


def _explain_one(img, points, classifier, class_index, args, seed):
    meta = {"method": args.method, "seed": seed, "class_index": class_index,
            "classes": classifier.classes}
    if args.method == "lime":
        seg = slic(img, target_regions=args.regions, compactness=args.compactness,
                   iterations=args.iterations, seed=seed)
        params = LimeParams(n_samples=args.samples, kernel_width=args.kernel_width,
                            ridge=args.ridge, occlusion_color=args.occlusion, seed=seed)
        result = explain_lime(img, seg, classifier, class_index, params, jobs=args.jobs)
        meta["region_count"] = result.region_count
        meta["params"] = {"n_samples": params.n_samples, "kernel_width": params.kernel_width,
                          "ridge": params.ridge, "occlusion_color": params.occlusion_color,
                          "target_regions": args.regions}
        return result.relevance, meta
    params = RiseParams(n_masks=args.masks, grid_size=args.grid_size,
                        keep_prob=args.keep_prob, occlusion_value=args.occlusion_rise, seed=seed)
    result = explain_rise(img, classifier, class_index, params, jobs=args.jobs)
    meta["params"] = {"n_masks": params.n_masks, "grid_size": params.grid_size,
                      "keep_prob": params.keep_prob, "occlusion_value": params.occlusion_value}
    return result.relevance, meta


def cmd_explain(args) -> int:
    manifest = evalharness.load_manifest(args.manifest)
    if len(manifest) == 0:
        print("error: no entries in manifest", file=sys.stderr)
        return 1
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    oracle_kind, oracle_param = _parse_oracle_arg(args.oracle) if args.oracle else (None, None)
    face_parts = oracle_kind in ("face-parts", "face-part")
    if oracle_kind == "face-part":
        classes = args.classes.split(",") if args.classes else [oracle_param, "rest"]
    else:
        classes = args.classes.split(",") if args.classes else _default_oracle_classes("face-parts")

    classifier = None
    if not face_parts:
        classifier = _open_classifier(args, args.input_size)
        classes = classifier.classes
    if args.class_name not in classes:
        print(f"error: class {args.class_name!r} not in {classes}", file=sys.stderr)
        return 1
    class_index = classes.index(args.class_name)

    failures = []
    try:
        for row, entry in enumerate(manifest.entries):
            stem = Path(entry.image).stem
            seed = args.seed + row
            try:
                img = imaging.read_png(entry.image)
                points = facealign.parse_pts(entry.landmarks) if entry.landmarks else None
                if args.align:
                    if points is None:
                        raise facealign.LandmarkError("--align needs landmarks per row")
                    side = args.input_size[0] if face_parts else classifier.input_size[0]
                    aligned = facealign.align_face(img, points, out_side=side)
                    img, points = aligned.image, aligned.landmarks
                    facealign.write_pts(out_dir / f"{stem}.pts", points)
                clf = classifier
                if face_parts:
                    if points is None:
                        raise facealign.LandmarkError("face-parts oracle needs landmarks per row")
                    clf = _face_parts_oracle(points, classes, (img.shape[1], img.shape[0]),
                                             part=oracle_param)
                relevance, meta = _explain_one(img, points, clf, class_index, args, seed)
                meta.update({"image": entry.image, "class": args.class_name,
                             "aligned": bool(args.align)})
                imaging.write_xhm1(out_dir / f"{stem}.xhm1", relevance)
                imaging.write_png(out_dir / f"{stem}.png",
                                  imaging.normalize_relevance(relevance))
                (out_dir / f"{stem}.json").write_text(json.dumps(meta, indent=2) + "\n")
            except (OSError, ValueError, gateway.GatewayError) as exc:
                failures.append({"image": entry.image, "reason": f"{type(exc).__name__}: {exc}"})
                print(f"error: {entry.image}: {exc}", file=sys.stderr)
    finally:
        if classifier is not None:
            classifier.close()

    summary = {"total": len(manifest), "explained": len(manifest) - len(failures),
               "method": args.method, "class": args.class_name, "failures": failures}
    (out_dir / "explain_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    _write_resolved_config(out_dir, args)
    print(f"explained {summary['explained']}/{len(manifest)} images ({args.method}, "
          f"class {args.class_name}) -> {out_dir}")
    return 0 if not failures else 1


# ---------------------------------------------------------------------------
# aggregate
# ---------------------------------------------------------------------------


def cmd_aggregate(args) -> int:
    records = evalharness.read_records_jsonl(args.records)
    if not records:
        print("error: no prediction records", file=sys.stderr)
        return 1
    expl_dir = Path(args.expl_dir)
    lm_dir = Path(args.landmarks_dir) if args.landmarks_dir else expl_dir
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    class_names = [args.class_name] if args.class_name else sorted({r.label for r in records})

    def paths_for(rec):
        stem = Path(rec.image).stem
        return expl_dir / f"{stem}.xhm1", lm_dir / f"{stem}.pts"

    # One shared canonical frame built from every record with landmarks on disk.
    all_points = []
    for rec in records:
        _, pts_path = paths_for(rec)
        if pts_path.exists():
            all_points.append(facealign.parse_pts(pts_path))
    if not all_points:
        print(f"error: no landmark files found in {lm_dir}", file=sys.stderr)
        return 1
    template = atlas.procrustes_mean(all_points, side=args.side,
                                     eye_y=args.template_eye_y,
                                     interocular=args.template_interocular)

    method = args.method
    panels = {}
    for class_name in class_names:
        try:
            chosen = atlas.select_positives(records, class_name, args.policy)
        except atlas.EmptySelectionError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        items = []
        for i in chosen:
            expl_path, pts_path = paths_for(records[i])
            if not expl_path.exists():
                print(f"error: missing explanation {expl_path}", file=sys.stderr)
                return 1
            if method is None:
                meta_path = expl_path.with_suffix(".json")
                if meta_path.exists():
                    method = json.loads(meta_path.read_text()).get("method")
            items.append((imaging.read_xhm1(expl_path), facealign.parse_pts(pts_path)))
        heatmap = atlas.aggregate_global(items, template, provenance={
            "model": args.model_id, "dataset": args.dataset_id,
            "method": method or "unknown", "class": class_name, "policy": args.policy,
        }, jobs=args.jobs)
        base = out_dir / f"global_{class_name}"
        imaging.write_xhm1(base.with_suffix(".xhm1"), heatmap.map)
        imaging.write_png(Path(f"{base}_grey.png"), heatmap.map)
        imaging.write_heatmap_png(Path(f"{base}_color.png"), heatmap.map)
        Path(f"{base}.json").write_text(json.dumps(heatmap.provenance, indent=2) + "\n")
        panels[class_name] = heatmap.map
        print(f"class {class_name}: averaged {heatmap.count} explanations ({args.policy})")

    report.heatmap_panel(panels, out_dir / "heatmaps.png",
                         suptitle=f"{args.model_id or ''} {method or ''} ({args.policy})".strip())
    _write_resolved_config(out_dir, args)
    return 0


# ---------------------------------------------------------------------------
# evaluate / folds
# ---------------------------------------------------------------------------


def _evaluate_face_parts(manifest, classes, input_size, preprocess):
    """Per-image landmark-keyed oracles; mirrors evalharness.evaluate.

    The oracle is rebuilt at each image's own size, so no static size
    check applies here.
    """
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    records, skipped = [], []
    for entry in manifest.entries:
        try:
            if not entry.landmarks:
                raise facealign.LandmarkError("face-parts oracle needs landmarks per row")
            img = imaging.read_png(entry.image)
            points = facealign.parse_pts(entry.landmarks)
            if preprocess:
                aligned = facealign.align_face(img, points, out_side=max(input_size))
                img, points = aligned.image, aligned.landmarks
            clf = _face_parts_oracle(points, classes, (img.shape[1], img.shape[0]))
            probs = gateway.predict_batch(clf, [img])[0]
        except (OSError, ValueError) as exc:
            skipped.append((entry.image, f"{type(exc).__name__}: {exc}"))
            continue
        pred_idx = int(np.argmax(probs))
        counts[classes.index(entry.label), pred_idx] += 1
        records.append(evalharness.PredictionRecord(image=entry.image, label=entry.label,
                                                    probs=probs, pred=classes[pred_idx]))
    matrix = evalharness.ConfusionMatrix(counts=counts, classes=list(classes))
    return evalharness.EvaluationResult(matrix=matrix, records=records, skipped=skipped)


def cmd_evaluate(args) -> int:
    manifest = evalharness.load_manifest(args.manifest)
    if len(manifest) == 0:
        print("error: no entries in manifest", file=sys.stderr)
        return 1
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    face_parts = args.oracle and _parse_oracle_arg(args.oracle)[0] == "face-parts"
    if face_parts:
        classes = args.classes.split(",") if args.classes else _default_oracle_classes("face-parts")
        result = _evaluate_face_parts(manifest, classes, args.input_size, args.preprocess)
    else:
        classifier = _open_classifier(args, args.input_size)
        try:
            result = evalharness.evaluate(manifest, classifier,
                                          preprocessing=args.preprocess, jobs=args.jobs)
        finally:
            classifier.close()

    m = evalharness.metrics(result.matrix)
    evalharness.write_confusion_csv(out_dir / "confusion.csv", result.matrix)
    evalharness.write_metrics_json(out_dir / "metrics.json", m,
                                   extra={"skipped": [list(s) for s in result.skipped]})
    evalharness.write_records_jsonl(out_dir / "records.jsonl", result.records)
    report.confusion_figure(result.matrix, m, out_dir / "confusion_matrix.png")
    report.metrics_figure(m, out_dir / "metrics.png")

    if args.kfold:
        folds = evalharness.kfold_split(manifest, k=args.kfold, seed=args.seed)
        for i, fold in enumerate(folds):
            evalharness.save_manifest(out_dir / f"fold_{i}.csv", fold)
        print(f"wrote {args.kfold} fold manifests")

    _write_resolved_config(out_dir, args)
    print(f"accuracy {m.accuracy:.4f} over {m.total} images "
          f"({len(result.skipped)} skipped) -> {out_dir}")
    return 0


def cmd_folds(args) -> int:
    manifest = evalharness.load_manifest(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    folds = evalharness.kfold_split(manifest, k=args.k, seed=args.seed)
    for i, fold in enumerate(folds):
        evalharness.save_manifest(out_dir / f"fold_{i}.csv", fold)
    _write_resolved_config(out_dir, args)
    print(f"wrote {args.k} folds ({[len(f) for f in folds]} entries) -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_backend_args(p: argparse.ArgumentParser) -> None:
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--backend", help="command line of a wire-protocol model process")
    group.add_argument("--oracle", help=_ORACLE_HELP)
    p.add_argument("--classes", help="comma-separated class names for built-in oracles")
    p.add_argument("--input-size", type=_parse_size, default=(224, 224),
                   help="oracle input size as W,H (backends declare their own)")
    p.add_argument("--batch-size", type=int, default=32, help="wire batch size")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="facexplain",
        description="Saliency maps and evaluation for black-box facial-expression classifiers.",
    )
    parser.add_argument("--config", help="key=value config file merged under explicit flags")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("align", help="rotate/crop/resize faces from 68-point landmarks")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--side", type=int, default=224)
    p.add_argument("--margin", type=float, default=0.2, help="crop margin per side")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("explain", help="per-image saliency maps (lime or rise)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", required=True, choices=["lime", "rise"])
    p.add_argument("--class-name", required=True, help="class to explain")
    p.add_argument("--align", action="store_true", help="align faces before explaining")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--jobs", type=int, default=1)
    _add_backend_args(p)
    p.add_argument("--samples", type=int, default=1000, help="lime: perturbation samples")
    p.add_argument("--regions", type=int, default=30, help="lime: target superpixels")
    p.add_argument("--kernel-width", type=float, default=0.25, help="lime: proximity kernel width")
    p.add_argument("--ridge", type=float, default=1.0, help="lime: ridge strength")
    p.add_argument("--occlusion", type=float, default=0.0, help="lime: occlusion color")
    p.add_argument("--compactness", type=float, default=10.0, help="lime: slic compactness")
    p.add_argument("--iterations", type=int, default=10, help="lime: slic iterations")
    p.add_argument("--masks", type=int, default=4000, help="rise: mask count")
    p.add_argument("--grid-size", type=int, default=7, help="rise: cells per side")
    p.add_argument("--keep-prob", type=float, default=0.5, help="rise: keep probability")
    p.add_argument("--occlusion-rise", type=float, default=0.5, help="rise: occlusion value")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("aggregate", help="average explanations in canonical face space")
    p.add_argument("--expl-dir", required=True, help="directory of .xhm1 explanations")
    p.add_argument("--records", required=True, help="records.jsonl from evaluate")
    p.add_argument("--landmarks-dir", help="directory of .pts files (default: --expl-dir)")
    p.add_argument("--out", required=True)
    p.add_argument("--policy", default="true-positive", choices=atlas.SELECTION_POLICIES)
    p.add_argument("--class-name", help="single class (default: every class in the records)")
    p.add_argument("--side", type=int, default=224, help="canonical frame side")
    p.add_argument("--template-eye-y", type=float, default=0.4,
                   help="template framing: eye line height as a fraction of side")
    p.add_argument("--template-interocular", type=float, default=0.3,
                   help="template framing: interocular distance as a fraction of side")
    p.add_argument("--model-id", default="", help="provenance tag")
    p.add_argument("--dataset-id", default="", help="provenance tag")
    p.add_argument("--method", help="provenance tag (default: from explanation metadata)")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("evaluate", help="confusion matrix and metrics over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--preprocess", action="store_true", help="align faces before inference")
    p.add_argument("--kfold", type=int, help="also emit K fold manifests")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--jobs", type=int, default=1)
    _add_backend_args(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("folds", help="seed-deterministic k-fold manifest split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=cmd_folds)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()

    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        cfg = _load_config_file(known.config)
        for sp in parser._subparsers._group_actions[0].choices.values():  # type: ignore[union-attr]
            usable = {a.dest for a in sp._actions}
            sp.set_defaults(**{k: v for k, v in cfg.items() if k in usable})

    args = parser.parse_args(argv)
    for key, value in vars(args).items():
        if isinstance(value, str) and value.lower() in ("true", "false"):
            default = parser.get_default(key)
            if isinstance(default, bool) or key in ("align", "preprocess"):
                setattr(args, key, value.lower() == "true")
    try:
        return args.func(args)
    except gateway.GatewayError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
