"""Command-line interface.

Subcommands cover the full pipeline: generate datasets (synth), size
fruitlets in an observation (size), match two observations (match),
train and evaluate the matcher (train, eval), and turn paired
measurements into a growth/abscission report (growth).

Exit codes: 0 success, 2 usage, 3 missing input file, 4 malformed
input file, 5 the inputs parsed but could not be processed, 1
unexpected failure.
"""

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import dataio
from .assoc.network import AssociationNetwork
from .assoc.types import NetConfig
from .augment import AugmentConfig
from .dataio import SchemaError
from .growth import abscise_report, day_gap, growth_rates, zscore_mask
from .nn import CheckpointError
from .sizing import DisparityPatch, SizingError, size_from_mask
from .synth import SceneConfig
from .train import TrainConfig, TrainingAbortedError, evaluate, train

__all__ = ["main"]

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_SCHEMA = 4
EXIT_DATA = 5


class DataError(ValueError):
    """Inputs were well-formed but cannot be processed."""


def _dataclass_from_json(cls, path: str):
    doc = dataio.read_json(path)
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: expected a JSON object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(doc) - set(known)
    if unknown:
        raise SchemaError(f"{path}: unknown {cls.__name__} fields {sorted(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        default = known[name].default
        kwargs[name] = tuple(value) if isinstance(default, tuple) else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise SchemaError(f"{path}: bad {cls.__name__} ({e})") from e


def _net_config(args) -> NetConfig:
    if getattr(args, "net_config", None):
        return _dataclass_from_json(NetConfig, args.net_config)
    return NetConfig()


def _parse_thresholds(text: str):
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise SchemaError(f"threshold range must be start:stop:step, got {text!r}")
        start, stop, step = (float(p) for p in parts)
        if step <= 0 or stop < start:
            raise SchemaError(f"bad threshold range {text!r}")
        values = np.round(np.arange(start, stop + step / 2, step), 10)
        return [float(v) for v in values]
    try:
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError as e:
        raise SchemaError(f"bad threshold list {text!r} ({e})") from e


def cmd_synth(args) -> int:
    if args.config:
        config = _dataclass_from_json(SceneConfig, args.config)
    else:
        config = SceneConfig()
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    splits = {"train": list(range(args.pairs))}
    if args.eval_pairs:
        splits["eval"] = list(range(args.eval_offset, args.eval_offset + args.eval_pairs))
    path = dataio.save_dataset(
        config, splits, args.out, materialize=args.materialize, with_raw=args.with_raw
    )
    print(f"wrote {path} ({', '.join(f'{k}: {len(v)}' for k, v in splits.items())})")
    return EXIT_OK


def cmd_size(args) -> int:
    rows = []
    for obs_path in args.obs:
        obs = dataio.load_observation(obs_path)
        for index, node in enumerate(obs.nodes):
            if not node.is_cluster:
                continue
            if node.mask_crop is None or node.disparity_crop is None:
                raise DataError(
                    f"{obs_path}: node {index} has no mask/disparity crops; "
                    "regenerate the observation with raw crops"
                )
            meas, ellipse = size_from_mask(
                node.mask_crop,
                DisparityPatch(values=node.disparity_crop, bbox=node.bbox),
                args.baseline_mm,
                threshold=args.threshold,
            )
            rows.append(
                {
                    "cluster_id": obs.cluster_id,
                    "day": obs.day,
                    "node_index": index,
                    "fruitlet_id": node.fruitlet_id or "",
                    "diameter_mm": repr(meas.diameter_mm),
                    "minor_px": repr(ellipse.minor_px),
                    "major_px": repr(ellipse.major_px),
                    "angle": repr(ellipse.angle),
                    "disparity_px": repr(meas.disparity),
                    "baseline_mm": repr(float(args.baseline_mm)),
                }
            )
    if not rows:
        raise DataError("no clustered fruitlet nodes found in the given observations")
    dataio.write_measurements_csv(rows, args.out)
    print(f"wrote {args.out} ({len(rows)} measurements)")
    return EXIT_OK


def cmd_match(args) -> int:
    net = AssociationNetwork(_net_config(args), seed=0)
    net.store.load(args.ckpt)
    obs_a = dataio.load_observation(args.obs_a)
    obs_b = dataio.load_observation(args.obs_b)
    ms = net.match(obs_a, obs_b, threshold=args.threshold)
    dataio.write_json(dataio.matchset_to_dict(ms, args.threshold), args.out)
    print(
        f"wrote {args.out} ({len(ms.pairs)} matches, "
        f"{len(ms.unmatched_a)}+{len(ms.unmatched_b)} unmatched)"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    bundle = dataio.load_dataset(args.dataset)
    dataset = bundle.pairs(args.split)
    net = AssociationNetwork(_net_config(args), seed=args.net_seed)
    config = TrainConfig(
        epochs=args.epochs,
        lr=args.lr,
        accum_pairs=args.accum_pairs,
        seed=args.train_seed,
        augment=None if args.no_augment else AugmentConfig(),
    )
    os.makedirs(args.out, exist_ok=True)
    result = train(net, dataset, config, checkpoint_dir=args.out)
    csv_path = os.path.join(args.out, "loss.csv")
    tmp = f"{csv_path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("epoch,mean_loss,n_pairs\n")
        for e in result.epochs:
            fh.write(f"{e.epoch},{e.mean_loss!r},{e.n_pairs}\n")
    os.replace(tmp, csv_path)
    from .report import save_loss_curve

    save_loss_curve(result.loss_curve, os.path.join(args.out, "loss.png"))
    final = result.checkpoints[-1] if result.checkpoints else "(no checkpoint)"
    print(f"trained {config.epochs} epochs on {len(dataset)} pairs; final {final}")
    return EXIT_OK


def cmd_eval(args) -> int:
    bundle = dataio.load_dataset(args.dataset)
    dataset = bundle.pairs(args.split)
    net = AssociationNetwork(_net_config(args), seed=0)
    net.store.load(args.ckpt)
    points = evaluate(net, dataset, thresholds=_parse_thresholds(args.thresholds))
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "eval.csv")
    tmp = f"{csv_path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(
            "threshold,precision,recall,matching_score,"
            "true_positives,false_positives,false_negatives,n_pairs\n"
        )
        for p in points:
            fh.write(
                f"{p.threshold!r},{p.precision!r},{p.recall!r},{p.matching_score!r},"
                f"{p.true_positives},{p.false_positives},{p.false_negatives},{p.n_pairs}\n"
            )
    os.replace(tmp, csv_path)
    from .report import save_eval_curves

    save_eval_curves(points, os.path.join(args.out, "eval.png"))
    best = max(points, key=lambda p: p.matching_score)
    print(
        f"wrote {csv_path}; best matching score {best.matching_score:.4f} "
        f"at threshold {best.threshold:g}"
    )
    return EXIT_OK


def cmd_growth(args) -> int:
    meas_a = dataio.read_measurements_csv(args.meas_a)
    meas_b = dataio.read_measurements_csv(args.meas_b)
    ms, _thr = dataio.matchset_from_dict(dataio.read_json(args.matches), args.matches)
    by_index_a = {row["node_index"]: row for row in meas_a}
    by_index_b = {row["node_index"]: row for row in meas_b}
    if not meas_a or not meas_b:
        raise DataError("measurement tables are empty")
    gap = day_gap(meas_a[0]["day"], meas_b[0]["day"])

    triples = []
    for i, j, _p in ms.pairs:
        if i not in by_index_a:
            raise DataError(f"match references node {i} missing from {args.meas_a}")
        if j not in by_index_b:
            raise DataError(f"match references node {j} missing from {args.meas_b}")
        row_a, row_b = by_index_a[i], by_index_b[j]
        fid = row_a["fruitlet_id"] or f"a{i}-b{j}"
        triples.append((fid, row_a["diameter_mm"], row_b["diameter_mm"]))
    if not triples:
        raise DataError("no matched fruitlets to compute growth for")

    records = growth_rates(triples, gap)
    rates = np.array([r.rate_mm_per_day for r in records])
    report = abscise_report(rates, top_frac=args.top_frac, z_threshold=args.z_threshold)
    keep = zscore_mask(rates, args.z_threshold)

    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "growth.csv")
    tmp = f"{csv_path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("fruitlet_id,size_a_mm,size_b_mm,rate_mm_per_day,outlier,predicted_abscise\n")
        for rec, kept in zip(records, keep):
            drops = int(kept and rec.rate_mm_per_day < report.threshold)
            fh.write(
                f"{rec.fruitlet_id},{rec.size_a_mm!r},{rec.size_b_mm!r},"
                f"{rec.rate_mm_per_day!r},{int(not kept)},{drops}\n"
            )
    os.replace(tmp, csv_path)

    dataio.write_json(
        {
            "schema": dataio.SCHEMA_REPORT,
            "version": 1,
            "day_gap_days": gap,
            "median_fastest_growth": report.median_fastest_growth,
            "threshold": report.threshold,
            "abscise_percent": report.abscise_percent,
            "n_input": report.n_input,
            "n_kept": report.n_kept,
        },
        os.path.join(args.out, "report.json"),
    )
    from .report import save_growth_histogram

    save_growth_histogram(report, os.path.join(args.out, "growth.png"))
    print(
        f"wrote {csv_path}; median fastest growth {report.median_fastest_growth:.3f} "
        f"mm/day, predicted abscission {report.abscise_percent:.1f}%"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fruitlets",
        description="fruitlet sizing, cross-day matching, and growth reporting",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--pairs", type=int, default=100, help="training pairs")
    p.add_argument("--eval-pairs", type=int, default=0, help="held-out pairs")
    p.add_argument("--eval-offset", type=int, default=10_000_000,
                   help="generator index base for the eval split")
    p.add_argument("--seed", type=int, default=None, help="override scene seed")
    p.add_argument("--config", help="scene config JSON file")
    p.add_argument("--materialize", action="store_true",
                   help="write every pair to disk instead of storing only the recipe")
    p.add_argument("--with-raw", action="store_true",
                   help="include mask/disparity crops (needed for sizing)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("size", help="measure fruitlet diameters in observations")
    p.add_argument("--obs", nargs="+", required=True, help="observation JSON file(s)")
    p.add_argument("--baseline-mm", type=float, required=True, help="stereo baseline")
    p.add_argument("--threshold", type=float, default=0.5, help="mask threshold")
    p.add_argument("--out", required=True, help="measurement CSV path")
    p.set_defaults(func=cmd_size)

    p = sub.add_parser("match", help="match fruitlets between two observations")
    p.add_argument("--ckpt", required=True, help="trained checkpoint JSON")
    p.add_argument("--net-config", help="network config JSON file")
    p.add_argument("--obs-a", required=True)
    p.add_argument("--obs-b", required=True)
    p.add_argument("--threshold", type=float, default=0.2, help="confidence threshold")
    p.add_argument("--out", required=True, help="match set JSON path")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("train", help="train the matcher on a dataset")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True, help="run directory for checkpoints and curves")
    p.add_argument("--net-config", help="network config JSON file")
    p.add_argument("--net-seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=6)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--accum-pairs", type=int, default=8)
    p.add_argument("--train-seed", type=int, default=0)
    p.add_argument("--no-augment", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="eval")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--net-config", help="network config JSON file")
    p.add_argument("--thresholds", default="0.0:1.0:0.05",
                   help="comma list or start:stop:step range")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("growth", help="growth rates and abscission report")
    p.add_argument("--meas-a", required=True, help="day-A measurement CSV")
    p.add_argument("--meas-b", required=True, help="day-B measurement CSV")
    p.add_argument("--matches", required=True, help="match set JSON")
    p.add_argument("--top-frac", type=float, default=0.15)
    p.add_argument("--z-threshold", type=float, default=3.0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_growth)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: missing file: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (SchemaError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SCHEMA
    except (DataError, SizingError, TrainingAbortedError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
