"""Command-line surface: training, inference, evaluation and utilities.

Subcommands: train, infer, eval, rf-report, gradcheck, synth, freq,
import-raw.  Every command is deterministic given its configuration and
seed.  Dataset directories pair ``<case>_image.vol`` with
``<case>_labels.vol``.
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import fileio, gradcheck, rf, synth
from .config import RunConfig, load_config, parse_config
from .metrics import class_frequencies, default_region_map, evaluate_regions
from .network import NetworkState, ensemble_predict, predict_labels
from .optim import crossval, curves_csv, train

IMAGE_SUFFIX = "_image.vol"
LABELS_SUFFIX = "_labels.vol"

METRIC_COLUMNS = ("dice", "precision", "sensitivity", "specificity")


# -- shared helpers --------------------------------------------------------


def dataset_stems(data_dir):
    data_dir = Path(data_dir)
    stems = sorted(
        p.name[: -len(IMAGE_SUFFIX)]
        for p in data_dir.glob(f"*{IMAGE_SUFFIX}")
        if (data_dir / f"{p.name[:-len(IMAGE_SUFFIX)]}{LABELS_SUFFIX}").exists()
    )
    if not stems:
        raise ValueError(f"{data_dir}: no {IMAGE_SUFFIX}/{LABELS_SUFFIX} pairs")
    return stems


def load_dataset(data_dir):
    data_dir = Path(data_dir)
    pairs = []
    for stem in dataset_stems(data_dir):
        image = fileio.read_volume(data_dir / f"{stem}{IMAGE_SUFFIX}")
        labels = fileio.read_volume(data_dir / f"{stem}{LABELS_SUFFIX}")
        if image.ndim != 4:
            raise ValueError(f"{stem}: image file does not hold an image")
        if labels.ndim != 3:
            raise ValueError(f"{stem}: labels file does not hold a label map")
        pairs.append((image, labels))
    return pairs


def write_case(out_dir, stem, image, labels):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fileio.write_volume(out_dir / f"{stem}{IMAGE_SUFFIX}", image)
    fileio.write_volume(out_dir / f"{stem}{LABELS_SUFFIX}", labels)


def run_config_from(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def metrics_csv(rows):
    """Rows of (label, RegionMetrics) as CSV; undefined values stay explicit."""
    lines = ["region," + ",".join(METRIC_COLUMNS)]
    for label, metrics in rows:
        cells = [
            "undefined" if getattr(metrics, col) is None else repr(getattr(metrics, col))
            for col in METRIC_COLUMNS
        ]
        lines.append(f"{label}," + ",".join(cells))
    return "\n".join(lines) + "\n"


def emit(text, out_path):
    if out_path:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# -- subcommands -----------------------------------------------------------


def cmd_train(args):
    cfg = run_config_from(args)
    dataset = load_dataset(args.data_dir)
    spec = cfg.arch_spec()
    train_cfg = cfg.train_config()
    adam = cfg.adam_config()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.folds:
        result = crossval(
            spec, dataset, args.folds, train_cfg, adam, threads=args.threads
        )
        for fold in result.folds:
            fileio.save_checkpoint(out_dir / f"fold_{fold.fold}.ckpt", fold.result.network)
            (out_dir / f"fold_{fold.fold}_curves.csv").write_text(
                curves_csv(fold.result.epochs), encoding="utf-8"
            )
        rows = [
            (f"fold_{fold.fold}/{name}", metrics)
            for fold in result.folds
            for name, metrics in fold.metrics.items()
        ]
        rows += [(f"mean/{name}", m) for name, m in result.mean_metrics.items()]
        (out_dir / "metrics.csv").write_text(metrics_csv(rows), encoding="utf-8")
        for fold in result.folds:
            print(
                f"fold {fold.fold}: epochs={fold.result.epochs[-1].epoch} "
                f"best_val={fold.result.best_val_loss:.6f}"
            )
        return 0
    net = NetworkState.build(spec, seed=cfg.seed)
    result = train(net, dataset, dataset, train_cfg, adam)
    fileio.save_checkpoint(out_dir / "model.ckpt", result.network)
    (out_dir / "curves.csv").write_text(curves_csv(result.epochs), encoding="utf-8")
    print(
        f"trained {result.epochs[-1].epoch} epochs; best epoch "
        f"{result.best_epoch} val_loss {result.best_val_loss:.6f}"
    )
    return 0


def _pred_stem(volume_path):
    stem = Path(volume_path).name
    if stem.endswith(".vol"):
        stem = stem[: -len(".vol")]
    if stem.endswith("_image"):
        stem = stem[: -len("_image")]
    return stem


def cmd_infer(args):
    nets = [fileio.load_checkpoint(p) for p in args.net]
    single_file = len(args.volumes) == 1 and not Path(args.out).is_dir()
    for volume_path in args.volumes:
        image = fileio.read_volume(volume_path)
        if image.ndim != 4:
            raise ValueError(f"{volume_path}: expected an image volume")
        if len(nets) == 1:
            labels = predict_labels(nets[0], image)
        else:
            labels = ensemble_predict(nets, image)
        if single_file:
            out_path = Path(args.out)
            out_path.parent.mkdir(parents=True, exist_ok=True)
        else:
            out_dir = Path(args.out)
            out_dir.mkdir(parents=True, exist_ok=True)
            out_path = out_dir / f"{_pred_stem(volume_path)}_pred.vol"
        fileio.write_volume(out_path, labels)
        print(f"{volume_path} -> {out_path}")
    return 0


def cmd_eval(args):
    pred = fileio.read_volume(args.pred)
    truth = fileio.read_volume(args.truth)
    if pred.ndim != 3 or truth.ndim != 3:
        raise ValueError("eval expects two label-map volumes")
    if args.region_map:
        regions = parse_config(Path(args.region_map).read_text(encoding="utf-8")).regions
        if not regions:
            raise ValueError(f"{args.region_map}: defines no regions")
    else:
        class_count = int(max(pred.max(), truth.max())) + 1
        regions = default_region_map(max(class_count, 2))
    rows = evaluate_regions(pred, truth, regions)
    emit(metrics_csv(sorted(rows.items())), args.out)
    return 0


def cmd_rf_report(args):
    cfg = run_config_from(args)
    rows = rf.receptive_field_trace(cfg.arch_spec(), input_shape=args.input_shape)
    text = rf.render_csv(rows) + "\n" if args.format == "csv" else rf.render_text(rows) + "\n"
    emit(text, args.out)
    return 0


def cmd_gradcheck(args):
    start = time.time()
    results = gradcheck.run_all(seed=args.seed, instances=args.instances)
    failed = [r for r in results if not r.ok]
    for r in results:
        print(f"{'ok ' if r.ok else 'FAIL'} {r.name:32s} {r.error:.3e}")
    print(
        f"{len(results) - len(failed)}/{len(results)} checks passed "
        f"in {time.time() - start:.1f}s (tolerance {gradcheck.TOLERANCE:g})"
    )
    return 1 if failed else 0


def cmd_synth(args):
    rng = np.random.default_rng(args.seed)
    if args.kind == "healthy-mirror":
        if not args.source:
            raise ValueError("healthy-mirror needs --source with existing volumes")
        data_dir = Path(args.source)
        for stem in dataset_stems(data_dir):
            image = fileio.read_volume(data_dir / f"{stem}{IMAGE_SUFFIX}")
            labels = fileio.read_volume(data_dir / f"{stem}{LABELS_SUFFIX}")
            mirrored, blank = synth.healthy_mirror_from(image, labels)
            write_case(args.out, f"{stem}_mirror", mirrored, blank)
            print(f"{stem} -> {stem}_mirror")
        return 0
    generator = {
        "spheres": synth.spheres_volume,
        "hand-like": synth.hand_like_volume,
    }[args.kind]
    stem_base = args.kind.replace("-", "_")
    for i in range(args.count):
        image, labels = generator(rng)
        write_case(args.out, f"{stem_base}_{i}", image, labels)
    print(f"wrote {args.count} {args.kind} volumes to {args.out}")
    return 0


def cmd_freq(args):
    data_dir = Path(args.data_dir)
    label_volumes = [
        fileio.read_volume(data_dir / f"{stem}{LABELS_SUFFIX}")
        for stem in dataset_stems(data_dir)
    ]
    class_count = max(2, int(max(lab.max() for lab in label_volumes)) + 1)
    freqs = class_frequencies(label_volumes, class_count)
    print(f"{'class':>5}  {'frequency':>12}")
    for cls, freq in enumerate(freqs):
        print(f"{cls:>5}  {freq:>12.6e}")
    return 0


def cmd_import_raw(args):
    array = fileio.import_raw(args.raw, args.sidecar)
    fileio.write_volume(args.out, array)
    kind = "image" if array.ndim == 4 else "label map"
    print(f"imported {kind} {array.shape} -> {args.out}")
    return 0


# -- parser ----------------------------------------------------------------


def _parse_shape(raw):
    parts = tuple(int(v) for v in raw.split(","))
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated extents")
    return parts


def build_parser():
    parser = argparse.ArgumentParser(
        prog="vseg", description="Volumetric segmentation engine."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one network or a cross-validated set")
    p.add_argument("data_dir")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="run")
    p.add_argument("--folds", type=int)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("infer", help="predict labels with one net or an ensemble")
    p.add_argument("volumes", nargs="+")
    p.add_argument("--net", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_infer)

    p = sub.add_parser("eval", help="score predicted labels against the truth")
    p.add_argument("pred")
    p.add_argument("truth")
    p.add_argument("--region-map")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("rf-report", help="receptive-field table for the architecture")
    p.add_argument("--config")
    p.add_argument("--input-shape", type=_parse_shape)
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_rf_report)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate labeled synthetic volumes")
    p.add_argument("kind", choices=("spheres", "hand-like", "healthy-mirror"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--source", help="dataset to mirror (healthy-mirror only)")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("freq", help="per-class voxel frequency audit")
    p.add_argument("data_dir")
    p.set_defaults(handler=cmd_freq)

    p = sub.add_parser("import-raw", help="wrap a raw little-endian array")
    p.add_argument("raw")
    p.add_argument("sidecar")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_import_raw)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
