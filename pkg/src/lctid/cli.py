"""Command-line surface: synth, extract, plot, train, eval, ablate, combine.

Every run is deterministic given identical flags and seed; results files
embed the resolved configuration.  A flat ``key = value`` config file can
preset any flag (flags win).  Seed resolution: --seed flag, then the
LCTID_SEED environment variable, then 0.

Exit codes: 0 ok, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import cnn, experiments, features
from .corpus import (CorpusError, CorpusManifest, SynthSpec,
                     derive_balanced_subset, load_manifest, read_wav,
                     synth_corpus)
from .features import NormStats, extract_matrix, resolve_featureset

logger = logging.getLogger("lctid")

_Y_LABELS = {
    "F0": "Hz", "ENERGY": "energy", "VPROB": "probability",
    "JITTER": "ratio", "DJITTER": "ratio", "SHIMMER": "ratio",
    "HNR": "log-HNR", "SFLUX": "flux", "SHARP": "bark", "ZCR": "crossings/s",
}


# ---------------------------------------------------------------------------
# Helpers

def _atomic_write_bytes(path: Path, blob: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def _atomic_write_text(path: Path, text: str) -> None:
    _atomic_write_bytes(path, text.encode("utf-8"))


def parse_hours(text: str) -> float:
    """'8h', '8', '0.5h' -> hours as float."""
    t = text.strip().lower()
    if t.endswith("h"):
        t = t[:-1]
    try:
        value = float(t)
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot parse hours from {text!r}")
    if value < 0:
        raise argparse.ArgumentTypeError("hours must be >= 0")
    return value


def _parse_config_file(path: str) -> dict:
    """Flat key = value lines; '#' starts a comment."""
    values: dict = {}
    for i, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{i}: expected 'key = value'")
        key, _, val = line.partition("=")
        key = key.strip().replace("-", "_")
        val = val.strip().strip("\"'")
        if val.lower() in ("true", "false"):
            parsed: object = val.lower() == "true"
        else:
            try:
                parsed = int(val)
            except ValueError:
                try:
                    parsed = float(val)
                except ValueError:
                    parsed = val
        values[key] = parsed
    return values


def _resolve_seed(value) -> int:
    if value is not None:
        return int(value)
    env = os.environ.get("LCTID_SEED")
    return int(env) if env else 0


def _experiment_config(args) -> experiments.ExperimentConfig:
    seed = _resolve_seed(args.seed)
    optimizer = args.optimizer or cnn.default_optimizer(args.arch)
    train_cfg = cnn.TrainConfig(
        optimizer=optimizer, batch_size=args.batch_size,
        learning_rate=args.lr, epochs=args.epochs,
        conv_dropout=args.conv_dropout, dense_dropout=args.dense_dropout,
        seed=seed, early_stop_patience=args.patience)
    return experiments.ExperimentConfig(
        train=train_cfg, arch_id=args.arch, test_fraction=args.test_fraction,
        split_seed=args.split_seed if args.split_seed is not None else seed,
        folds=args.folds, val_fraction=args.val_fraction)


def _load_balanced(args) -> CorpusManifest:
    manifest = load_manifest(args.manifest)
    if getattr(args, "balanced", None) is not None:
        manifest = derive_balanced_subset(manifest, args.balanced,
                                          _resolve_seed(args.seed))
    return manifest


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--arch", default="CA03", choices=sorted(cnn.ARCHITECTURES))
    p.add_argument("--optimizer", choices=["minibatch_gd", "sgd"],
                   help="default: per-architecture training method")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--conv-dropout", type=float, default=0.25)
    p.add_argument("--dense-dropout", type=float, default=0.5)
    p.add_argument("--patience", type=int, default=5,
                   help="early-stop patience on validation loss (0 = off)")
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--val-fraction", type=float, default=0.0)
    p.add_argument("--split-seed", type=int, default=None)
    p.add_argument("--folds", type=int, default=4)


# ---------------------------------------------------------------------------
# SVG contour plotting (two aligned panels, no plotting dependency)

def render_contour_svg(panels, ylabel: str, title: str) -> str:
    width, panel_h, pad = 860, 180, 50
    height = pad + len(panels) * (panel_h + 30)
    all_vals = np.concatenate([np.asarray(v, dtype=float) for _, _, v in panels])
    lo, hi = float(all_vals.min()), float(all_vals.max())
    if hi - lo < 1e-12:
        hi = lo + 1.0
    span = hi - lo
    lo -= 0.05 * span
    hi += 0.05 * span
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" font-family="monospace" font-size="12">',
             f'<text x="{width / 2:.0f}" y="18" text-anchor="middle" '
             f'font-size="14">{title}</text>']
    for pi, (name, times, vals) in enumerate(panels):
        top = pad + pi * (panel_h + 30)
        x0, x1 = 70, width - 20
        t_max = max(float(times[-1]), 1e-9) if len(times) else 1.0
        xs = x0 + (np.asarray(times, dtype=float) / t_max) * (x1 - x0)
        ys = top + panel_h - (np.asarray(vals, dtype=float) - lo) / (hi - lo) * panel_h
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
        parts += [
            f'<rect x="{x0}" y="{top}" width="{x1 - x0}" height="{panel_h}" '
            'fill="none" stroke="#999"/>',
            f'<polyline points="{pts}" fill="none" stroke="#1f4e8c" stroke-width="1.2"/>',
            f'<text x="{x0 - 8}" y="{top + 12}" text-anchor="end">{hi:.4g}</text>',
            f'<text x="{x0 - 8}" y="{top + panel_h}" text-anchor="end">{lo:.4g}</text>',
            f'<text x="{x0}" y="{top + panel_h + 16}">0</text>',
            f'<text x="{x1}" y="{top + panel_h + 16}" text-anchor="end">{t_max:.2f} s</text>',
            f'<text x="{(x0 + x1) / 2:.0f}" y="{top - 6}" text-anchor="middle">{name}</text>',
            f'<text x="16" y="{top + panel_h / 2:.0f}" '
            f'transform="rotate(-90 16 {top + panel_h / 2:.0f})" '
            f'text-anchor="middle">{ylabel}</text>',
        ]
    parts.append("</svg>")
    return "\n".join(parts)


# ---------------------------------------------------------------------------
# Subcommands

def cmd_synth(args) -> int:
    spec = SynthSpec(num_utterances=args.count, dur_min_s=args.dur_min,
                     dur_max_s=args.dur_max, sample_rate_hz=args.rate,
                     out_dir=args.out)
    manifest = synth_corpus(spec, _resolve_seed(args.seed))
    print(f"wrote {len(manifest)} utterances and manifest.tsv under {args.out}")
    return 0


def cmd_extract(args) -> int:
    # Durations are not needed here; skip them so a bad WAV surfaces as a
    # logged per-utterance failure instead of aborting the whole run.
    manifest = load_manifest(args.manifest, read_durations=False)
    channels = resolve_featureset(args.features)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index_lines = ["id,dialect,csv,frames"]
    failures = 0

    def one(record):
        wave = read_wav(record.audio_path)
        return extract_matrix(wave, channels, source_id=record.id)

    if args.jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(lambda r: _try(one, r), manifest.records))
    else:
        results = [_try(one, r) for r in manifest.records]
    for record, result in zip(manifest.records, results):
        if isinstance(result, Exception):
            logger.error("extract failed for %s: %s", record.id, result)
            failures += 1
            continue
        csv_path = out / f"{record.id}.csv"
        lines = [",".join(result.channel_ids)]
        lines += [",".join(repr(float(v)) for v in frame)
                  for frame in result.values.T]
        _atomic_write_text(csv_path, "\n".join(lines) + "\n")
        index_lines.append(
            f"{record.id},{record.dialect},{csv_path.name},{result.num_frames}")
    _atomic_write_text(out / "index.csv", "\n".join(index_lines) + "\n")
    print(f"extracted {len(manifest) - failures}/{len(manifest)} utterances to {out}")
    return 1 if failures else 0


def _try(fn, arg):
    try:
        return fn(arg)
    except Exception as exc:  # collected and reported per utterance
        return exc


def cmd_plot(args) -> int:
    feature_id = args.feature.strip().upper()
    if feature_id not in features.ALL_IDS:
        raise ValueError(f"unknown feature id {args.feature!r}; valid ids: "
                         + ", ".join(features.ALL_IDS))
    panels = []
    csv_lines = ["utterance,frame,time_s,value"]
    for tag, wav in (("A", args.wav_a), ("B", args.wav_b)):
        wave = read_wav(wav)
        mat = extract_matrix(wave, [feature_id], source_id=Path(wav).stem)
        vals = mat.values[0]
        times = np.arange(vals.size) * mat.hop_ms / 1000.0
        panels.append((f"{tag}: {Path(wav).name}", times, vals))
        for i, (t, v) in enumerate(zip(times, vals)):
            csv_lines.append(f"{tag},{i},{t!r},{float(v)!r}")
    ylabel = _Y_LABELS.get(feature_id, "coefficient")
    svg = render_contour_svg(panels, ylabel, f"{feature_id} contour")
    out = Path(args.out)
    _atomic_write_text(out, svg + "\n")
    _atomic_write_text(out.with_suffix(".csv"), "\n".join(csv_lines) + "\n")
    print(f"wrote {out} and {out.with_suffix('.csv')}")
    return 0


def cmd_train(args) -> int:
    config = _experiment_config(args)
    manifest = _load_balanced(args)
    channels = resolve_featureset(args.features)
    dataset = experiments.prepare_dataset(manifest, channels, jobs=args.jobs)
    train_idx, test_idx = experiments.stratified_holdout(
        dataset.labels, config.test_fraction, config.split_seed)
    report, model, aux = experiments.train_and_evaluate(
        dataset, channels, config, train_idx, test_idx)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_path = out / "model.lct"
    cnn.save(model, model_path)
    norm: NormStats = aux["norm"]
    _atomic_write_text(out / "norm.json", json.dumps({
        "channel_ids": list(norm.channel_ids),
        "mean": [repr(float(v)) for v in norm.mean],
        "std": [repr(float(v)) for v in norm.std],
    }, indent=2, sort_keys=True) + "\n")
    record = experiments.run_record(config, channels, [report], extra={
        "command": "train",
        "manifest": str(args.manifest),
        "balanced_hours": args.balanced,
        "segment_duration_s": aux["segment_duration_s"],
        "num_train_segments": aux["num_train_segments"],
        "history": aux["history"],
    })
    _atomic_write_text(out / "results.json",
                       json.dumps(record, indent=2, sort_keys=True) + "\n")
    print(f"model -> {model_path}")
    _print_report(report)
    return 0


def _load_norm(path: Path) -> NormStats:
    data = json.loads(path.read_text(encoding="utf-8"))
    return NormStats(mean=np.array([float(v) for v in data["mean"]]),
                     std=np.array([float(v) for v in data["std"]]),
                     channel_ids=tuple(data["channel_ids"]))


def cmd_eval(args) -> int:
    model = cnn.load(args.model)
    norm_path = Path(args.norm) if args.norm else Path(args.model).parent / "norm.json"
    norm = _load_norm(norm_path)
    manifest = load_manifest(args.manifest)
    report = experiments.evaluate(model, manifest, args.features, norm,
                                  jobs=args.jobs)
    _print_report(report)
    if args.out:
        _atomic_write_text(Path(args.out),
                           json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return 0


def cmd_ablate(args) -> int:
    config = _experiment_config(args)
    manifest = _load_balanced(args)
    channels = resolve_featureset(args.features)
    dataset = experiments.prepare_dataset(manifest, channels, jobs=args.jobs)
    if args.method == "rfe":
        table = experiments.rfe_round(channels, dataset, config)
    else:
        table = experiments.ife(channels, dataset, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table.write_csv(out / f"ranking_{args.method}.csv")
    gmin, gmax, gmean = table.gap_stats()
    record = experiments.run_record(config, channels, [], extra={
        "command": f"ablate:{args.method}",
        "manifest": str(args.manifest),
        "ranking": [{"feature": r.feature_id, "accuracy": r.accuracy,
                     "rank": r.rank} for r in table.rows],
        "rank_gap_stats": {"min": gmin, "max": gmax, "mean": gmean},
        "evaluations": table.evaluations,
    })
    _atomic_write_text(out / f"results_{args.method}.json",
                       json.dumps(record, indent=2, sort_keys=True) + "\n")
    for row in sorted(table.rows, key=lambda r: r.rank):
        print(f"rank {row.rank:2d}  acc {row.accuracy:.4f}  {row.feature_id}")
    return 0


def cmd_combine(args) -> int:
    config = _experiment_config(args)
    manifest = _load_balanced(args)
    base = resolve_featureset(args.base)
    extra = resolve_featureset(args.extra)
    union = tuple(c for c in features.ALL_IDS if c in set(base) | set(extra))
    dataset = experiments.prepare_dataset(manifest, union, jobs=args.jobs)
    report, _model, aux = experiments.combine_and_eval(base, extra, dataset, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    record = experiments.run_record(config, union, [report], extra={
        "command": "combine",
        "manifest": str(args.manifest),
        "base": list(base), "extra": list(extra),
        "segment_duration_s": aux["segment_duration_s"],
    })
    _atomic_write_text(out / "results_combine.json",
                       json.dumps(record, indent=2, sort_keys=True) + "\n")
    _print_report(report)
    return 0


def _print_report(report: experiments.EvalReport) -> None:
    for d, m in report.per_class.items():
        print(f"{d}: precision {m.precision:.4f}  recall {m.recall:.4f}  "
              f"f1 {m.f1:.4f}")
    print(f"overall accuracy {report.accuracy:.4f} over {report.total} utterances")


# ---------------------------------------------------------------------------
# Parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lctid",
        description="Literary vs colloquial speech dialect identification pipeline")
    parser.add_argument("--config", help="flat key = value config file; flags win")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic two-class corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--dur-min", type=float, default=1.0)
    p.add_argument("--dur-max", type=float, default=4.0)
    p.add_argument("--rate", type=int, default=16000)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="dump per-utterance feature CSVs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", default="handcrafted")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("plot", help="two-panel feature contour SVG + CSV")
    p.add_argument("--wav-a", required=True)
    p.add_argument("--wav-b", required=True)
    p.add_argument("--feature", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("train", help="train a model and score a held-out split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", default="handcrafted")
    p.add_argument("--balanced", type=parse_hours, default=None,
                   help="derive a balanced subset first, e.g. 8h")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a saved model on a manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", default="handcrafted")
    p.add_argument("--norm", default=None,
                   help="norm.json path (default: next to the model)")
    p.add_argument("--out", default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="feature ablation (RFE or IFE)")
    p.add_argument("--method", required=True, choices=["rfe", "ife"])
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", default="handcrafted")
    p.add_argument("--balanced", type=parse_hours, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("combine", help="concatenate two feature sets and evaluate")
    p.add_argument("--base", required=True)
    p.add_argument("--extra", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--balanced", type=parse_hours, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    _add_train_flags(p)
    p.set_defaults(func=cmd_combine)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    # Config file values become parser defaults; explicit flags still win.
    if "--config" in argv:
        cfg_path = argv[argv.index("--config") + 1]
        try:
            overrides = _parse_config_file(cfg_path)
        except (OSError, ValueError) as exc:
            parser.error(f"bad config file: {exc}")
        for sp in parser._subparsers._group_actions[0].choices.values():
            known = {a.dest for a in sp._actions}
            sp.set_defaults(**{k: v for k, v in overrides.items() if k in known})
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CorpusError, cnn.ModelFileError, cnn.ShapeMismatchError,
            cnn.TrainingDivergedError, ValueError, KeyError, OSError) as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
