"""Command-line entry point.

Subcommands: ``dataset build``, ``train classifier``, ``train gan``, ``eval``,
``pipeline run``, ``report plot`` and ``report summary``. Every run writes a
resolved-config snapshot (config.json) next to its outputs, honors the
ATTRENHANCE_SEED environment variable and exits 0 on success, 1 on validation
errors, 2 on runtime failures.
"""

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import metrics, pipeline, synthgen, trainloop
from .config import RunConfig, load_config
from .errors import ConfigError, SizeError
from .synthgen import AttributeSchema, bilinear_upsample, load_image, load_manifest


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_config_args(p):
    p.add_argument("--config", help="TOML config file (default: desk preset)")
    p.add_argument("--preset", choices=("desk", "full"),
                   help="named built-in preset instead of --config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, e.g. classifier.lr=0.05")


def _resolve_config(args, extra=()) -> RunConfig:
    overrides = list(args.set) + list(extra)
    if args.config:
        return load_config(path=args.config, overrides=overrides)
    return load_config(preset=args.preset or "desk", overrides=overrides)


# ---------------------------------------------------------------------------
# scoring helpers shared by eval and report summary

def _enhanced_images(records, dataset_dir, models, config, enhance):
    full = (config.image.height, config.image.width)
    factor = config.dataset.lowres_factor
    quarter = (full[0] // factor, full[1] // factor)
    images = []
    for r in records:
        img = load_image(dataset_dir, r)
        size = tuple(img.shape[-2:])
        if enhance == "none":
            if size == quarter:
                img = bilinear_upsample(img, factor)
            elif size != full:
                raise SizeError((full, quarter), size, what=f"image {r.id}")
        elif enhance == "reconstruction":
            if size != full:
                raise SizeError(full, size, what=f"image {r.id}")
        elif enhance == "sr":
            if size != quarter:
                raise SizeError(quarter, size, what=f"image {r.id}")
        else:
            raise ConfigError(f"unknown enhancement {enhance!r}")
        images.append(img)
    stack = np.stack(images)
    if enhance in ("reconstruction", "sr"):
        net = models.reconstruction if enhance == "reconstruction" else models.sr
        outs = []
        with torch.no_grad():
            for lo in range(0, len(stack), 32):
                outs.append(net(torch.from_numpy(stack[lo:lo + 32])).numpy())
        stack = np.concatenate(outs)
    return stack


def score_records(records, dataset_dir, models, config,
                  enhance="none") -> metrics.MetricsReport:
    """Classify a manifest after the requested enhancement and score it."""
    images = _enhanced_images(records, dataset_dir, models, config, enhance)
    probs = trainloop.batched_probs(models.classifier, images)
    labels = np.stack([r.labels for r in records]).astype(np.float32)
    return metrics.evaluate(probs, labels, models.schema.names,
                            config.pipeline.threshold)


# ---------------------------------------------------------------------------
# SVG history plots

_SERIES_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
                  "#17becf", "#8c564b")


def _svg_polyline(points, color):
    coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in points)
    return (f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
            f'points="{coords}"/>')


def plot_history(history, out_path):
    """Render every numeric series in the history as a normalized polyline
    (legend carries each series' actual range) and write a companion CSV."""
    if not history:
        raise ValueError("history is empty")
    keys = [k for k in history[0] if k != "epoch"
            and isinstance(history[0][k], (int, float))]
    epochs = [r["epoch"] for r in history]
    width, height, pad = 640, 360, 45
    inner_w, inner_h = width - 2 * pad, height - 2 * pad - 14 * len(keys)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{pad}" y="{pad}" width="{inner_w}" height="{inner_h}" '
        'fill="none" stroke="#999"/>',
    ]
    span_e = max(epochs) - min(epochs) or 1
    for i, key in enumerate(keys):
        values = [float(r.get(key, float("nan"))) for r in history]
        vmin, vmax = min(values), max(values)
        span = (vmax - vmin) or 1.0
        color = _SERIES_COLORS[i % len(_SERIES_COLORS)]
        points = [
            (pad + inner_w * (e - min(epochs)) / span_e,
             pad + inner_h * (1 - (v - vmin) / span))
            for e, v in zip(epochs, values)
        ]
        parts.append(_svg_polyline(points, color))
        parts.append(
            f'<text x="{pad}" y="{pad + inner_h + 16 + 14 * i}" '
            f'font-family="monospace" font-size="11" fill="{color}">'
            f'{key}: {vmin:.4g} .. {vmax:.4g} (final {values[-1]:.4g})</text>')
    parts.append(
        f'<text x="{pad}" y="{pad - 8}" font-family="monospace" '
        f'font-size="11" fill="#333">epochs {min(epochs)}..{max(epochs)}</text>')
    parts.append("</svg>")
    out_path = Path(out_path)
    out_path.write_text("\n".join(parts) + "\n")

    csv_path = out_path.with_suffix(".csv")
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch"] + keys)
        for r in history:
            writer.writerow([r["epoch"]] + [repr(float(r.get(k, float("nan"))))
                                            for k in keys])
    return out_path, csv_path


# ---------------------------------------------------------------------------
# corruption summary (six rows: each corrupted test set, direct and enhanced)

SUMMARY_ROWS = ("occluded", "occluded+net", "lowres", "lowres+net",
                "corrupted", "restored")


def corruption_summary(dataset_dir, models, config):
    dataset_dir = Path(dataset_dir)
    occ = load_manifest(dataset_dir / "test_occluded.jsonl")
    low = load_manifest(dataset_dir / "test_lowres.jsonl")
    merged = load_manifest(dataset_dir / "test_merged.jsonl")
    clean = load_manifest(dataset_dir / "test_clean.jsonl")

    rows = {
        "occluded": score_records(occ, dataset_dir, models, config, "none"),
        "occluded+net": score_records(occ, dataset_dir, models, config,
                                      "reconstruction"),
        "lowres": score_records(low, dataset_dir, models, config, "none"),
        "lowres+net": score_records(low, dataset_dir, models, config, "sr"),
    }
    batch = pipeline.run_batch(merged, dataset_dir, models, config)
    rows["corrupted"] = batch.corrupted
    rows["restored"] = batch.restored

    clean_by_id = {r.id: r for r in clean}
    factor = config.dataset.lowres_factor
    psnr_bilinear, psnr_sr = [], []
    sr_images = _enhanced_images(low, dataset_dir, models, config, "sr")
    for record, sr_img in zip(low, sr_images):
        reference = load_image(dataset_dir, clean_by_id[record.id.rsplit("_", 1)[0]])
        lowres = load_image(dataset_dir, record)
        psnr_bilinear.append(metrics.psnr(bilinear_upsample(lowres, factor),
                                          reference))
        psnr_sr.append(metrics.psnr(sr_img, reference))
    psnr = {"bilinear": float(np.mean(psnr_bilinear)),
            "sr": float(np.mean(psnr_sr))}
    return rows, psnr, batch.counts


def _summary_to_files(rows, psnr, counts, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "rows": {name: rows[name].to_dict() for name in SUMMARY_ROWS},
        "psnr": psnr,
        "counts": counts,
    }
    (out / "summary.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n")
    with open(out / "summary.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["input"] + list(metrics.AGGREGATE_METRICS))
        for name in SUMMARY_ROWS:
            r = rows[name]
            writer.writerow([name] + [repr(r.aggregate(m))
                                      for m in metrics.AGGREGATE_METRICS])
    return out / "summary.json", out / "summary.csv"


def _print_summary(rows, psnr):
    header = f"{'input':<14}" + "".join(f"{m:>11}" for m in metrics.AGGREGATE_METRICS)
    print(header)
    for name in SUMMARY_ROWS:
        r = rows[name]
        print(f"{name:<14}" + "".join(
            f"{r.aggregate(m):>11.4f}" for m in metrics.AGGREGATE_METRICS))
    print(f"mean test PSNR: bilinear {psnr['bilinear']:.2f} dB, "
          f"sr {psnr['sr']:.2f} dB")


# ---------------------------------------------------------------------------
# subcommands

def cmd_dataset_build(args):
    config = _resolve_config(args)
    manifest, schema = synthgen.build_dataset(config, args.out,
                                              overwrite=args.overwrite)
    config.save_snapshot(args.out)
    print(f"wrote {manifest} ({len(schema)} attributes)")
    return 0


def cmd_train_classifier(args):
    config = _resolve_config(args)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    config.save_snapshot(args.out)
    ckpt, history_path, history = trainloop.train_classifier(
        args.data, config, args.out, resume=args.resume)
    last = history[-1] if history else {}
    print(f"wrote {ckpt} (final test mA {last.get('test_ma', float('nan')):.4f})")
    return 0


def cmd_train_gan(args):
    config = _resolve_config(args)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    config.save_snapshot(args.out)
    g, d, history_path, history = trainloop.train_gan(
        args.data, config, args.which, args.out, resume=args.resume)
    last = history[-1] if history else {}
    print(f"wrote {g} and {d} (final sse {last.get('loss_sse', float('nan')):.4f})")
    return 0


def _models_for(args, config, require):
    manifest = Path(args.manifest)
    schema = AttributeSchema.load(manifest.parent / "schema.json")
    return pipeline.load_models(args.models, config, schema, require=require)


def cmd_eval(args):
    config = _resolve_config(args)
    require = ["classifier"]
    if args.enhance == "reconstruction":
        require.append("reconstruction_generator")
    elif args.enhance == "sr":
        require.append("sr_generator")
    models = _models_for(args, config, require)
    records = load_manifest(args.manifest)
    report = score_records(records, Path(args.manifest).parent, models, config,
                           enhance=args.enhance)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n")
    if out.parent != Path("."):
        config.save_snapshot(out.parent)
    for m in metrics.AGGREGATE_METRICS:
        print(f"{m}: {report.aggregate(m):.4f}")
    return 0


def cmd_pipeline_run(args):
    extra = [f"pipeline.trigger={args.trigger}"] if args.trigger is not None else []
    config = _resolve_config(args, extra=extra)
    models = _models_for(args, config, ("classifier", "reconstruction_generator",
                                        "sr_generator"))
    records = load_manifest(args.manifest)
    result = pipeline.run_batch(records, Path(args.manifest).parent, models, config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(result.to_json() + "\n")
    if out.parent != Path("."):
        config.save_snapshot(out.parent)
    print(f"corrupted mA {result.corrupted.mA:.4f} -> "
          f"restored mA {result.restored.mA:.4f} "
          f"(sr used {result.counts['used_sr']}, "
          f"reconstruction used {result.counts['used_reconstruction']})")
    return 0


def cmd_report_plot(args):
    with open(args.history) as f:
        history = [json.loads(line) for line in f if line.strip()]
    svg, csv_path = plot_history(history, args.out)
    print(f"wrote {svg} and {csv_path}")
    return 0


def cmd_report_summary(args):
    config = _resolve_config(args)
    schema = AttributeSchema.load(Path(args.data) / "schema.json")
    models = pipeline.load_models(
        args.models, config, schema,
        require=("classifier", "reconstruction_generator", "sr_generator"))
    rows, psnr, counts = corruption_summary(args.data, models, config)
    _summary_to_files(rows, psnr, counts, args.out)
    config.save_snapshot(args.out)
    _print_summary(rows, psnr)
    return 0


def build_parser():
    parser = _Parser(prog="attrenhance",
                     description="synthetic person-attribute benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    dataset = sub.add_parser("dataset", parser_class=_Parser).add_subparsers(
        dest="subcommand", required=True)
    build = dataset.add_parser("build", parser_class=_Parser)
    _add_config_args(build)
    build.add_argument("--out", required=True)
    build.add_argument("--overwrite", action="store_true")
    build.set_defaults(func=cmd_dataset_build)

    train = sub.add_parser("train", parser_class=_Parser).add_subparsers(
        dest="subcommand", required=True)
    clf = train.add_parser("classifier", parser_class=_Parser)
    _add_config_args(clf)
    clf.add_argument("--data", required=True)
    clf.add_argument("--out", required=True)
    clf.add_argument("--resume", help="checkpoint to continue from")
    clf.set_defaults(func=cmd_train_classifier)
    gan = train.add_parser("gan", parser_class=_Parser)
    _add_config_args(gan)
    gan.add_argument("--which", choices=("reconstruction", "sr"), required=True)
    gan.add_argument("--data", required=True)
    gan.add_argument("--out", required=True)
    gan.add_argument("--resume", help="directory with checkpoints to continue from")
    gan.set_defaults(func=cmd_train_gan)

    ev = sub.add_parser("eval", parser_class=_Parser)
    _add_config_args(ev)
    ev.add_argument("--models", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--out", default="report.json")
    ev.add_argument("--enhance", choices=("none", "reconstruction", "sr"),
                    default="none")
    ev.set_defaults(func=cmd_eval)

    pipe = sub.add_parser("pipeline", parser_class=_Parser).add_subparsers(
        dest="subcommand", required=True)
    run = pipe.add_parser("run", parser_class=_Parser)
    _add_config_args(run)
    run.add_argument("--models", required=True)
    run.add_argument("--manifest", required=True)
    run.add_argument("--out", default="report.json")
    run.add_argument("--trigger", type=float, default=None)
    run.set_defaults(func=cmd_pipeline_run)

    report = sub.add_parser("report", parser_class=_Parser).add_subparsers(
        dest="subcommand", required=True)
    plot = report.add_parser("plot", parser_class=_Parser)
    plot.add_argument("--history", required=True)
    plot.add_argument("--out", required=True)
    plot.set_defaults(func=cmd_report_plot)
    summary = report.add_parser("summary", parser_class=_Parser)
    _add_config_args(summary)
    summary.add_argument("--models", required=True)
    summary.add_argument("--data", required=True)
    summary.add_argument("--out", required=True)
    summary.set_defaults(func=cmd_report_summary)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SizeError, ValueError, FileExistsError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
