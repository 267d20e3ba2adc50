"""Command-line front-end: statistics -> weights -> calibration -> NMS -> evaluation."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from collections import Counter
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import annotations as ann
from . import calibration as cal
from . import evalharness as ev
from . import figures
from . import fractal as fr
from . import synthetic as syn


def _figure_path(out_path, suffix: str) -> Path:
    p = Path(out_path)
    return p.with_name(p.stem + "_" + suffix + ".png")


def _method_name(value: str) -> str:
    return value.replace("_", "-")


def _variant_name(value: str) -> str:
    return value.replace("-", "_")


# --- subcommands --------------------------------------------------------------


def cmd_stats(args) -> int:
    ds = ann.load_annotations(args.annotations, include_crowd=args.include_crowd)
    freqs = ann.compute_class_frequencies(ds)
    group_counts = Counter(f.group for f in freqs.values())
    print(f"images: {len(ds.images)}  instances: {len(ds.instances)}  classes: {len(freqs)}")
    print(
        "groups: "
        + "  ".join(f"{g}={group_counts.get(g, 0)}" for g in ann.GROUPS)
    )
    if args.out:
        ann.save_class_stats_csv(freqs, ds.categories, args.out)
        print(f"wrote {args.out}")

    if args.hist_out:
        hist = ann.spatial_histogram(ds, class_filter=args.class_id, grid_size=args.grid)
        if str(args.hist_out).endswith(".json"):
            ann.save_histogram_json(hist, args.hist_out)
        else:
            ann.save_histogram_csv(hist, args.hist_out)
        print(f"wrote {args.hist_out}")
        if not args.no_figures:
            fig_path = _figure_path(args.hist_out, "heatmap")
            label = "all classes" if args.class_id is None else f"class {args.class_id}"
            figures.save_heatmap(hist, fig_path, title=f"{label}, G={args.grid}")
            print(f"wrote {fig_path}")
    return 0


def cmd_weights(args) -> int:
    ds = ann.load_annotations(args.annotations, include_crowd=args.include_crowd)
    variant = _variant_name(args.variant)
    weights = cal.CalibrationWeights.from_dataset(
        ds,
        variant=variant,
        beta=args.beta,
        lam=args.lam,
        t_cap=args.t_cap,
        grid_sizes=args.grid or (),
        workers=args.workers,
    )
    weights.save(args.out)
    print(f"wrote {args.out}")

    group_counts = Counter(m["group"] for m in weights.class_meta.values())
    n_fallback = sum(1 for m in weights.class_meta.values() if m["fallback"])
    print(
        "groups: "
        + "  ".join(f"{g}={group_counts.get(g, 0)}" for g in ann.GROUPS)
        + f"  fallback={n_fallback}"
    )
    phi = weights.phi
    print(
        f"phi ({variant}): min={phi.min():.3f}  median={np.median(phi):.3f}  max={phi.max():.3f}"
    )
    edges = np.array([0.0, 0.5, 1.0, 1.5, 2.0])
    binned = np.histogram(phi, bins=np.append(edges, 2.0 + 1e-9))[0]
    binned[-2] += binned[-1]  # fold the [2, 2] spike into the last bin
    print(
        "phi histogram: "
        + "  ".join(f"[{lo:.1f},{hi:.1f})={n}" for lo, hi, n in zip(edges, edges[1:], binned))
    )
    corr = _phi_frequency_correlation(weights)
    if corr is None:
        print("phi vs ln(n) correlation: undefined (zero variance)")
    else:
        print(f"phi vs ln(n) correlation: {corr:.4f}")

    def class_series(class_id):
        pts = ann.collect_centers(ds, class_id)
        t = math.isqrt(len(pts))
        if args.t_cap is not None:
            t = min(t, args.t_cap)
        return fr.build_box_count_series(pts, t, class_id=class_id)

    index = {c: k for k, c in enumerate(weights.class_ids)}
    fittable = [c for c in weights.class_ids if weights.counts[index[c]] >= fr.FALLBACK_MIN_COUNT]
    if args.series_out:
        fr.save_series_csv([class_series(c) for c in fittable], args.series_out)
        print(f"wrote {args.series_out}")

    if not args.no_figures:
        fig_path = _figure_path(args.out, "phi_scatter")
        figures.save_phi_scatter(weights.phi, weights.counts, fig_path, corr=corr)
        print(f"wrote {fig_path}")
        top = sorted(fittable, key=lambda c: -weights.counts[index[c]])[:5]
        if top:
            items = [
                (
                    weights.class_meta[c].get("name") or f"class {c}",
                    class_series(c).pairs,
                    float(weights.phi[index[c]]),
                )
                for c in top
            ]
            fit_path = _figure_path(args.out, "fit_curves")
            figures.save_boxcount_fits(items, fit_path)
            print(f"wrote {fit_path}")
    return 0


def _phi_frequency_correlation(weights) -> float | None:
    keep = weights.counts >= 1
    if keep.sum() < 2:
        return None
    try:
        return fr.pearson_correlation(
            np.log(weights.counts[keep]), weights.phi[keep]
        )
    except ValueError:
        return None


def cmd_calibrate(args) -> int:
    header, records = cal.read_logit_records(args.logits)
    weights = cal.CalibrationWeights.load(args.weights)
    if args.beta is not None or args.lam is not None:
        weights = weights.with_hyperparams(beta=args.beta, lam=args.lam)
    if int(header["num_classes"]) != weights.num_classes:
        raise ValueError(
            f"logits declare {header['num_classes']} classes but weights carry "
            f"{weights.num_classes}"
        )
    method = args.method
    if method == "fracal-binary" and header["mode"] != cal.SIGMOID:
        raise ValueError("method fracal-binary requires a sigmoid-mode logits file")
    if method in ("fracal", "opposite", "la", "iif", "pcsa", "norcal") and header["mode"] != cal.SOFTMAX:
        raise ValueError(f"method {method} requires a softmax-mode logits file")

    scored = [
        cal.apply_method(
            rec, weights, method, grid_size=args.grid, tau=args.tau, gamma=args.gamma
        )
        for rec in records
    ]
    out_header = dict(header)
    out_header["class_ids"] = list(weights.class_ids)
    cal.write_score_records(args.out, scored, out_header)
    print(f"wrote {args.out} ({len(scored)} records, method={method})")
    return 0


def _sniff_jsonl(path) -> str:
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                first = json.loads(line)
                return "scores" if "mode" in first else "detections"
    return "empty"


def _load_candidates(path, score_threshold: float, fallback_class_ids=None) -> list:
    kind = _sniff_jsonl(path)
    if kind == "empty":
        return []
    if kind == "detections":
        return [d for d in ev.read_detections(path) if d.score >= score_threshold]
    header, records = cal.read_score_records(path)
    class_ids = header.get("class_ids")
    if class_ids is None:
        c = int(header["num_classes"])
        if fallback_class_ids is not None and len(fallback_class_ids) == c:
            class_ids = fallback_class_ids
        else:
            class_ids = list(range(c))
    return ev.detections_from_scores(records, class_ids, score_threshold=score_threshold)


def cmd_nms(args) -> int:
    dets = _load_candidates(args.detections, args.score_threshold)
    kept = ev.cap_per_image(
        ev.nms(dets, iou_threshold=args.nms_iou, classwise=not args.no_classwise),
        args.max_per_image,
    )
    ev.write_detections(args.out, kept)
    print(f"wrote {args.out} (kept {len(kept)} of {len(dets)})")
    return 0


def cmd_eval(args) -> int:
    ds = ann.load_annotations(args.annotations, include_crowd=args.include_crowd)
    groups = ann.compute_class_frequencies(ds)
    dets = _load_candidates(
        args.detections, args.score_threshold, fallback_class_ids=sorted(ds.categories)
    )
    report = ev.run_pipeline(
        dets,
        ds,
        groups,
        nms_iou=args.nms_iou,
        iou_match=args.iou_match,
        score_threshold=args.score_threshold,
        max_per_image=args.max_per_image,
    )
    print(ev.format_report_table(report))
    if args.out:
        doc = ev.report_to_dict(report)
        doc["meta"] = {
            "nms_iou": args.nms_iou,
            "iou_match": args.iou_match,
            "score_threshold": args.score_threshold,
            "max_per_image": args.max_per_image,
        }
        if not args.no_timestamp:
            doc["meta"]["generated_at"] = datetime.now(timezone.utc).isoformat()
        with open(args.out, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
        print(f"wrote {args.out}")
        if not args.no_figures:
            fig_path = _figure_path(args.out, "ap")
            figures.save_ap_bars(report, fig_path)
            print(f"wrote {fig_path}")
    return 0


def cmd_simulate(args) -> int:
    spec = syn.ScenarioSpec(
        num_classes=args.num_classes,
        images=args.images,
        seed=args.seed,
        freq_exponent=args.freq_exponent,
        freq_max=args.freq_max,
        bias_frequency=args.bias_a,
        bias_spatial=args.bias_b,
        separation=args.separation,
        noise=args.noise,
        clutter_rate=args.clutter_rate,
    )
    batch = syn.simulate_scenario(spec)
    ann.write_annotations(batch.ground_truth, args.out_annotations)
    cal.write_logit_records(
        args.out_logits,
        batch.proposals,
        mode=cal.SOFTMAX,
        num_classes=spec.num_classes,
        extra_header={
            "class_ids": sorted(batch.ground_truth.categories),
            "rng": batch.metadata["rng"],
            "seed": spec.seed,
        },
    )
    n_clutter = sum(1 for t in batch.truth_link if t is None)
    print(
        f"wrote {args.out_annotations} ({len(batch.ground_truth.instances)} instances) "
        f"and {args.out_logits} ({len(batch.proposals)} proposals, {n_clutter} clutter)"
    )
    return 0


def cmd_correlate(args) -> int:
    weights = cal.CalibrationWeights.load(args.weights)
    corr = _phi_frequency_correlation(weights)
    if corr is None:
        raise ValueError("correlation undefined: fewer than two populated classes or zero variance")
    print(f"phi vs ln(n) correlation over {int((weights.counts >= 1).sum())} classes: {corr:.4f}")
    if args.out:
        figures.save_phi_scatter(weights.phi, weights.counts, args.out, corr=corr)
        print(f"wrote {args.out}")
    return 0


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fracal",
        description="Fractal-dimension statistics and post-hoc detector calibration.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="per-class frequency table and location histogram")
    p.add_argument("annotations")
    p.add_argument("--out", help="class statistics CSV")
    p.add_argument("--hist-out", help="histogram matrix (.csv or .json)")
    p.add_argument("--grid", type=int, default=64, help="histogram grid size (default 64)")
    p.add_argument("--class-id", type=int, default=None, help="restrict histogram to one class")
    p.add_argument("--include-crowd", action="store_true")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("weights", help="compute calibration weights from annotations")
    p.add_argument("annotations")
    p.add_argument("--out", required=True, help="weights JSON path")
    p.add_argument("--variant", choices=["box", "info", "smooth-info"], default="box")
    p.add_argument("--beta", type=float, default=10.0, help="log base (default 10)")
    p.add_argument("--lambda", dest="lam", type=float, default=2.0, help="space exponent (default 2)")
    p.add_argument("--t-cap", type=int, default=None, help="cap on the quadratic-rule threshold")
    p.add_argument("--grid", type=int, action="append", help="embed grid priors at size G (repeatable)")
    p.add_argument("--series-out", help="per-class (G, nu) series CSV")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--include-crowd", action="store_true")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_weights)

    p = sub.add_parser("calibrate", help="apply a calibration method to a logits file")
    p.add_argument("logits")
    p.add_argument("--weights", required=True)
    p.add_argument("--method", type=_method_name, choices=list(cal.METHODS), default="fracal")
    p.add_argument("--out", required=True)
    p.add_argument("--beta", type=float, default=None, help="override the weights header")
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="override the weights header")
    p.add_argument("--grid", type=int, default=None, help="grid size for --method grid")
    p.add_argument("--tau", type=float, default=1.0, help="la strength (default 1)")
    p.add_argument("--gamma", type=float, default=1.0, help="norcal exponent (default 1)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("nms", help="class-wise non-maximum suppression")
    p.add_argument("detections", help="scores or detections JSONL")
    p.add_argument("--out", required=True)
    p.add_argument("--nms-iou", type=float, default=ev.DEFAULT_NMS_IOU)
    p.add_argument("--score-threshold", type=float, default=0.0)
    p.add_argument("--max-per-image", type=int, default=ev.DEFAULT_MAX_PER_IMAGE)
    p.add_argument("--no-classwise", action="store_true")
    p.set_defaults(func=cmd_nms)

    p = sub.add_parser("eval", help="NMS then per-class and grouped average precision")
    p.add_argument("detections", help="scores or detections JSONL")
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", help="report JSON path")
    p.add_argument("--nms-iou", type=float, default=ev.DEFAULT_NMS_IOU)
    p.add_argument("--iou-match", type=float, default=ev.DEFAULT_MATCH_IOU)
    p.add_argument("--score-threshold", type=float, default=0.0)
    p.add_argument("--max-per-image", type=int, default=ev.DEFAULT_MAX_PER_IMAGE)
    p.add_argument("--include-crowd", action="store_true")
    p.add_argument("--no-timestamp", action="store_true")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_eval)

    scn = syn.ScenarioSpec()
    p = sub.add_parser("simulate", help="generate a synthetic long-tailed scenario")
    p.add_argument("--out-annotations", required=True)
    p.add_argument("--out-logits", required=True)
    p.add_argument("--num-classes", type=int, default=scn.num_classes)
    p.add_argument("--images", type=int, default=scn.images)
    p.add_argument("--seed", type=int, default=scn.seed)
    p.add_argument("--freq-exponent", type=float, default=scn.freq_exponent)
    p.add_argument("--freq-max", type=int, default=scn.freq_max)
    p.add_argument("--bias-a", type=float, default=scn.bias_frequency, help="frequency-bias strength")
    p.add_argument("--bias-b", type=float, default=scn.bias_spatial, help="spatial-bias strength")
    p.add_argument("--separation", type=float, default=scn.separation, help="true-class logit margin")
    p.add_argument("--noise", type=float, default=scn.noise)
    p.add_argument("--clutter-rate", type=float, default=scn.clutter_rate)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("correlate", help="Pearson correlation of dimension vs log frequency")
    p.add_argument("weights")
    p.add_argument("--out", help="scatter figure PNG")
    p.set_defaults(func=cmd_correlate)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
