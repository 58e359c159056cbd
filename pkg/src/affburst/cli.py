"""Command-line entry point: synth, label, stats, train, eval, gradcheck.

Each command writes its outputs (CSV/JSON plus PNG figures) under ``--out``
and prints a delimited summary to stdout. Exit codes: 0 ok, 2 config error,
3 data error, 4 numeric error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import contour as ct
from . import nn
from .dataio import load_contour, load_manifest, load_recording_sources, save_labels
from .errors import AffburstError, ConfigError, NumericError
from .experiment import FIELD_DOCS, LabelConfig, RunConfig, dump_json, eval_run, train_run, write_synthetic_set
from .models import KINDS, ModelConfig, build_model

log = logging.getLogger("affburst")


def _config_epilog() -> str:
    defaults = RunConfig().to_dict()
    lines = ["config file fields (JSON; unknown keys are rejected, flags override the file):"]
    for key, doc in FIELD_DOCS.items():
        node = defaults
        for part in key.split("."):
            node = node.get(part) if isinstance(node, dict) else None
        lines.append(f"  {key:<28} {doc} [default: {json.dumps(node)}]")
    return "\n".join(lines)


def _emit_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    import io
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, float) else v


def _overrides(args, mapping: dict) -> dict:
    return {key: getattr(args, dest) for dest, key in mapping.items() if getattr(args, dest, None) is not None}


def _threshold(deltas, lab: LabelConfig) -> float:
    if lab.tau is not None:
        return lab.tau
    if not any(np.any(d.values != 0) for d in deltas):
        # flat contours: no threshold can mark a burst, so every frame is idle
        log.warning("all delta values are zero; labeling every frame idle")
        return float("inf")
    return ct.calibrate_threshold(deltas, lab.delta_half, lab.target_coverage)


def _lab_from_args(args) -> LabelConfig:
    return LabelConfig(L=args.L, delta_half=args.delta_half, tau=args.tau, target_coverage=args.target_coverage)


def _label_flags(p) -> None:
    p.add_argument("--L", type=int, default=ct.DEFAULT_L, help="delta half-width in frames")
    p.add_argument("--delta-half", type=int, default=ct.DEFAULT_DELTA_HALF, help="segment half-window in frames")
    p.add_argument("--tau", type=float, help="fixed threshold; calibrated over all inputs when omitted")
    p.add_argument("--target-coverage", type=float, default=ct.DEFAULT_COVERAGE, help="calibration target")
    p.add_argument("--frame-rate", type=float, default=ct.DEFAULT_FRAME_RATE, help="contour frame rate in Hz")


# -- commands ------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = RunConfig.load(args.config, _overrides(args, {
        "seed": "seed", "n_recordings": "synth.n_recordings", "n_sessions": "synth.n_sessions",
        "length": "synth.length", "coupling": "synth.coupling", "noise_level": "synth.noise_level",
        "attribute": "attribute",
    }))
    manifest = write_synthetic_set(cfg, args.out)
    sys.stdout.write(_emit_csv([{"id": e.id, "session": e.session, "features": e.features_path,
                                 "contour": e.contour_path} for e in manifest.entries]))
    return 0


def cmd_label(args) -> int:
    lab = _lab_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    contours = [load_contour(p, args.frame_rate, args.attribute) for p in args.contours]
    deltas = [ct.compute_delta(c, lab.L) for c in contours]
    tau = _threshold(deltas, lab)
    rows = []
    for path, c, d in zip(args.contours, contours, deltas):
        labels = ct.extend_segments(ct.detect_burst_points(d, tau), lab.delta_half)
        stem = Path(path).stem
        stats = ct.segment_stats(labels, d, c.frame_rate_hz)
        save_labels(labels, out / f"{stem}.labels.csv", {
            "tau": tau if np.isfinite(tau) else None, "L": lab.L, "delta_half": lab.delta_half, "coverage": labels.coverage,
            "frame_rate_hz": c.frame_rate_hz, "attribute": c.attribute_name, "source": Path(path).name,
        })
        if not args.no_plot:
            from .plotting import plot_labels
            plot_labels(c, d, labels, tau, out / f"{stem}.labels.png", title=stem)
        rows.append({"file": Path(path).name, "n_frames": len(c), "tau": _fmt(tau),
                     "coverage": _fmt(labels.coverage), "n_segments": stats.n_segments})
    (out / "labels_summary.csv").write_text(_emit_csv(rows))
    sys.stdout.write(_emit_csv(rows))
    return 0


def _stats_groups(args) -> dict[str, list]:
    groups: dict[str, list] = {}
    if args.manifest:
        m = load_manifest(args.manifest)
        for rid in m.ids:
            groups.setdefault(m.attribute, []).append(load_recording_sources(m, rid)[1])
    for spec in args.contours:
        attr, _, path = spec.rpartition("=")
        attr = attr or args.attribute
        groups.setdefault(attr, []).append(load_contour(path, args.frame_rate, attr))
    if not groups:
        raise ConfigError("stats needs contour files or --manifest")
    return groups


def cmd_stats(args) -> int:
    """Per-attribute segment count, mean and total burst duration, mean |delta| in bursts."""
    lab = _lab_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, durations = [], {}
    for attr, contours in sorted(_stats_groups(args).items()):
        deltas = [ct.compute_delta(c, lab.L) for c in contours]
        tau = _threshold(deltas, lab)
        labels = [ct.extend_segments(ct.detect_burst_points(d, tau), lab.delta_half) for d in deltas]
        fr = contours[0].frame_rate_hz
        s = ct.pooled_stats(zip(labels, deltas), fr)
        durations[attr] = np.concatenate([ct.run_lengths(l.values) for l in labels]) / fr
        rows.append({"attribute": attr, "n_recordings": len(contours), "tau": _fmt(tau),
                     **{k: _fmt(v) for k, v in s.as_dict().items()},
                     "coverage": _fmt(s.total_duration_s / s.total_duration_recording_s)})
    (out / "stats.csv").write_text(_emit_csv(rows))
    dump_json(out / "stats.json", {"labeling": {"L": lab.L, "delta_half": lab.delta_half}, "attributes": rows})
    if not args.no_plot:
        from .plotting import plot_segment_durations
        plot_segment_durations(durations, out / "segment_durations.png")
    sys.stdout.write(_emit_csv(rows))
    return 0


def cmd_train(args) -> int:
    ov = _overrides(args, {
        "seed": "seed", "kind": "model.kind", "max_epochs": "train.max_epochs",
        "patience": "train.patience", "lr": "train.lr", "batch_size": "train.batch_size",
        "strategy": "folds.strategy", "k": "folds.k", "calibration": "labeling.calibration",
        "attribute": "attribute",
    })
    cfg = RunConfig.load(args.config, ov, reset_shape_on_kind=True)
    histories = train_run(cfg, args.manifest, args.out, jobs=args.jobs)
    if not args.no_plot:
        from .plotting import plot_histories
        plot_histories(histories, Path(args.out) / "histories.png")
    sys.stdout.write(_emit_csv([{"fold": fid, "epochs": h.epochs_run, "best_epoch": h.best_epoch,
                                 "best_val_uaf1": f"{max(h.val_uaf1):.6f}"} for fid, h in sorted(histories.items())]))
    return 0


def cmd_eval(args) -> int:
    reports, summary = eval_run(args.run, jobs=args.jobs, attribute=args.attribute)
    if not args.no_plot:
        from .plotting import plot_fold_metrics
        plot_fold_metrics(reports, Path(args.run) / "fold_metrics.png")
    sys.stdout.write((Path(args.run) / "metrics.csv").read_text())
    m, p = summary["mean_over_folds"], summary["pooled"]
    sys.stdout.write(f"mean,,,{m['uaf1']:.6f},{m['uar']:.6f}\npooled,,,{p['uaf1']:.6f},{p['uar']:.6f}\n")
    return 0


def cmd_gradcheck(args) -> int:
    kinds = KINDS if args.kind == "all" else (args.kind,)
    rows, worst = [], 0.0
    for kind in kinds:
        cfg = ModelConfig.for_kind(kind, seed=args.seed)
        model = build_model(cfg)
        rng = np.random.default_rng(args.seed)
        x = rng.normal(size=(args.batch, cfg.window.n_rows, cfg.n_features))
        y = rng.integers(0, 2, args.batch)
        y[:2] = (0, 1)
        r = nn.grad_check(model.network, x, y, nn.ClassWeights(1.4, 3.3), h=args.h,
                          max_params=args.max_params, seed=args.seed)
        worst = max(worst, r.max_rel_error)
        rows.append({"kind": kind, "max_rel_error": f"{r.max_rel_error:.3e}", "n_checked": r.n_checked,
                     "n_skipped_kinks": r.n_skipped_kinks, "pass": int(r.max_rel_error < args.tol)})
    text = _emit_csv(rows)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "gradcheck.csv").write_text(text)
    sys.stdout.write(text)
    if worst >= args.tol:
        raise NumericError(f"gradient check failed: max relative error {worst:.3e} >= {args.tol:g}")
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="affburst", description=__doc__.splitlines()[0],
                                     epilog=_config_epilog(), formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"affburst {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic feature/contour dataset and manifest",
                       epilog=_config_epilog(), formatter_class=fmt)
    p.add_argument("--config", help="run config JSON (synth section is used)")
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-recordings", type=int)
    p.add_argument("--n-sessions", type=int)
    p.add_argument("--length", type=int, help="frames per recording")
    p.add_argument("--coupling", type=float, help="0 gives a null task")
    p.add_argument("--noise-level", type=float)
    p.add_argument("--attribute")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("label", help="burst/idle labels for contour CSVs (frame_index,value)")
    p.add_argument("contours", nargs="+", help="contour CSV files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--attribute", default="arousal")
    p.add_argument("--no-plot", action="store_true", help="skip the per-file figures")
    _label_flags(p)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("stats", help="per-attribute segment statistics table")
    p.add_argument("contours", nargs="*", metavar="[ATTR=]CONTOUR", help="contour CSV, optionally tagged with its attribute")
    p.add_argument("--manifest", help="take contours from a dataset manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--attribute", default="arousal", help="attribute for untagged contours")
    p.add_argument("--no-plot", action="store_true")
    _label_flags(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="cross-validated training; writes checkpoints and histories",
                       epilog=_config_epilog(), formatter_class=fmt)
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--manifest", required=True, help="dataset manifest JSON")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--jobs", type=int, default=1, help="folds trained in parallel; results do not depend on it")
    p.add_argument("--seed", type=int)
    p.add_argument("--kind", choices=KINDS)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--strategy", choices=("k_test_groups", "leave_one_session_out"))
    p.add_argument("--k", type=int, help="recordings per test group")
    p.add_argument("--calibration", choices=("global", "per_fold"))
    p.add_argument("--attribute")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score fold checkpoints of a run directory on their test recordings")
    p.add_argument("run", help="run directory written by train")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--attribute", help="attribute name for the reports (defaults to the run config)")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of a model's analytic gradients")
    p.add_argument("--kind", choices=KINDS + ("all",), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--max-params", type=int, default=400, help="parameters sampled per model")
    p.add_argument("--batch", type=int, default=3)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out", help="optional directory for gradcheck.csv")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=(logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except AffburstError as exc:
        print(f"affburst {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
