"""
Command-line interface.

    sketchforge prep | init-extractor | build-ref | match | train | synth | eval | selfcheck

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from sketchforge import __version__, charts, tensor
from sketchforge import evaluation as ev
from sketchforge import features as feat
from sketchforge import patchmatch as pm
from sketchforge import train as tr
from sketchforge.config import RunConfig, load_run_config, require_paths
from sketchforge.errors import ConfigError, SketchForgeError, VersionMismatchError
from sketchforge.fileio import atomic_write, load_and_validate_list, read_image, write_csv, write_image
from sketchforge.preprocess import list_images, prepare_directory
from sketchforge.selfcheck import run_selfcheck

logger = logging.getLogger(__name__)


# ============ HELPERS ============

def _overrides(args: argparse.Namespace) -> Dict[str, object]:
    """Flags that name RunConfig keys; unset flags are None and leave file values alone."""
    return {key: value for key, value in vars(args).items() if key in RunConfig.model_fields and value is not None}


def _config(args: argparse.Namespace) -> RunConfig:
    config = load_run_config(args.config, _overrides(args))
    tensor.set_default_dtype(config.precision)
    return config


def _csv_list(text: Optional[str], cast=int) -> Optional[List]:
    if text is None:
        return None
    try:
        return [cast(item) for item in text.split(",") if item.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list, got '{text}'") from None


def _split(text: str) -> List[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def _photo_paths(source: Path) -> List[Path]:
    return [source] if source.is_file() else list_images(source)


def _pair_images(photo_dir: Path, sketch_dir: Path) -> List[pm.ReferencePair]:
    """Reference pairs matched by file stem; photos without a sketch are skipped."""
    sketches = {p.stem: p for p in list_images(sketch_dir)}
    pairs = []
    for path in list_images(photo_dir):
        if path.stem not in sketches:
            logger.warning("No sketch for reference photo %s; skipping", path.name)
            continue
        pairs.append(pm.ReferencePair(
            photo=read_image(path),
            sketch=read_image(sketches[path.stem], channels=1),
            pair_id=path.stem,
        ))
    return pairs


def _minmax(image: np.ndarray) -> np.ndarray:
    low, high = float(image.min()), float(image.max())
    return (image - low) / (high - low) if high > low else np.zeros_like(image)


# ============ COMMANDS ============

def cmd_prep(args: argparse.Namespace) -> int:
    config = _config(args)
    require_paths(config, "photos", "landmarks")
    require_paths(config, "out", must_exist=False)
    manifest = prepare_directory(config.photos, config.landmarks, config.out, keep_aligned=args.keep_aligned)
    skipped = int((manifest["status"] == "skipped").sum())
    print(f"Prepared {len(manifest) - skipped} images, skipped {skipped} (manifest: {Path(config.out) / 'manifest.csv'})")
    return 0


def cmd_init_extractor(args: argparse.Namespace) -> int:
    config = _config(args)
    require_paths(config, "extractor", must_exist=False)
    widths = [max(1, int(round(w * args.width_scale))) for w in (64, 128, 256, 512, 512)]
    extractor = feat.Extractor.random(feat.ExtractorSpec.vgg19(widths=widths), seed=config.seed)
    feat.save_weights(config.extractor, extractor)
    print(f"Wrote random extractor (widths {', '.join(map(str, widths))}) to {config.extractor}")
    return 0


def cmd_build_ref(args: argparse.Namespace) -> int:
    config = _config(args)
    require_paths(config, "photos", "sketches", "extractor")
    require_paths(config, "store", must_exist=False)
    pairs = _pair_images(config.photos, config.sketches)
    if not pairs:
        raise ConfigError(f"no photo/sketch pairs found in {config.photos} and {config.sketches}")
    extractor = feat.load_weights(config.extractor)
    store = pm.build_reference_store(pairs, extractor, config.loss_weights().taps, k=config.patch_k)
    store.save(config.store)
    print(f"Reference store: {len(store)} pairs, taps {', '.join(store.taps)} -> {config.store}")
    return 0


def cmd_match(args: argparse.Namespace) -> int:
    config = _config(args)
    require_paths(config, "store", "extractor")
    store = pm.ReferenceStore.load(config.store)
    extractor = feat.load_weights(config.extractor)
    photo = read_image(args.photo)
    features = feat.extract(extractor, photo, set(store.taps), source_id=Path(args.photo).stem)

    pseudo = pm.generate_pseudo_features(features, store, [args.tap], config.k_ref)[args.tap]
    match = pseudo.match
    rows, cols = np.divmod(np.arange(match.grid.m), match.grid.cols)
    table = pd.DataFrame({
        "patch": np.arange(match.grid.m),
        "row": rows + match.grid.half,
        "col": cols + match.grid.half,
        "pair_id": [store.ids[i] for i in match.pair_index],
        "ref_patch": match.patch_index,
        "score": match.score,
    })
    if args.out:
        write_csv(args.out, table)
    print(f"Matched {match.grid.m} patches at {args.tap}; mean cosine {float(match.score.mean()):.4f}")

    if args.dump_pixels:
        write_image(args.dump_pixels, pm.naive_reconstruction(match, store, photo.shape[-2:]))
    if args.dump_feature:
        panels = [_minmax(pseudo.fold().mean(axis=0))]
        if args.sketch:
            truth = feat.extract(extractor, read_image(args.sketch, channels=1), [args.tap])[args.tap]
            panels.append(_minmax(truth.mean(axis=0)))
        write_image(args.dump_feature, np.concatenate(panels, axis=1)[None])
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _config(args)
    require_paths(config, "photos", "store", "extractor")
    require_paths(config, "checkpoints", must_exist=False)
    for extra in config.extra_photos:
        if not Path(extra).exists():
            raise ConfigError(f"'extra_photos' path does not exist: {extra}")

    store = pm.ReferenceStore.load(config.store)
    extractor = feat.load_weights(config.extractor)
    sources = [Path(config.photos)] + [Path(p) for p in config.extra_photos]
    trainset = [read_image(path) for source in sources for path in _photo_paths(source)]
    logger.info("Training on %d photos from %d source(s)", len(trainset), len(sources))

    train_config = config.train_config()
    history = tr.train(train_config, trainset, store, extractor, checkpoint_dir=config.checkpoints)
    history_path = Path(args.history) if args.history else Path(config.checkpoints) / "history.csv"
    tr.save_history(history_path, history)
    if args.plot:
        charts.write_chart(args.plot, charts.history_chart(history))
    print(f"Trained {train_config.iterations} iterations; history in {history_path}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    config = _config(args)
    require_paths(config, "photos")
    require_paths(config, "out", must_exist=False)
    checkpoint = tr.Checkpoint.load(args.checkpoint)
    net = checkpoint.generator_net()
    out_dir = Path(config.out)
    paths = _photo_paths(Path(config.photos))
    for path in paths:
        sketch = tr.generator_forward(net, read_image(path))
        write_image(out_dir / f"{path.stem}.pgm", sketch)
    print(f"Synthesized {len(paths)} sketches into {out_dir}")
    return 0


def _load_eval_pairs(list_path: Path, config: RunConfig):
    df, error = load_and_validate_list(list_path, {"synthesized", "ground_truth"})
    if error:
        raise ConfigError(f"{list_path}: {error}")
    base = list_path.parent
    if "name" not in df.columns:
        df["name"] = df["synthesized"].map(lambda p: Path(p).stem)
    if "label" not in df.columns:
        df["label"] = df["name"]
    synth = [read_image(base / p, channels=1) for p in df["synthesized"]]
    truth = [read_image(base / p, channels=1) for p in df["ground_truth"]]
    return df, synth, truth


def cmd_eval(args: argparse.Namespace) -> int:
    config = _config(args)
    list_path = Path(args.pairs)
    if not list_path.is_file():
        raise ConfigError(f"pair list not found: {list_path}")
    df, synth, truth = _load_eval_pairs(list_path, config)

    report = ev.evaluate_pairs(
        list(zip(df["name"], synth, truth)),
        smooth=args.smooth,
        data_range=config.data_range,
        sigma_spatial=config.bilateral_sigma_spatial,
        sigma_range=config.bilateral_sigma_range,
        radius=config.bilateral_radius,
        params=config.fsim_params(),
    )
    out = Path(args.out) if args.out else list_path.with_name("metrics.csv")
    write_csv(out, report.per_pair)
    for name, value in report.means.items():
        print(f"{name:>14}: {value:.4f}")

    curve = None
    if args.recognition:
        gallery = df.drop_duplicates("label")
        curve = ev.recognition_curve(
            probes=np.stack(synth),
            gallery=np.stack([truth[i] for i in gallery.index]),
            labels=df["label"].to_numpy(),
            gallery_labels=gallery["label"].to_numpy(),
            dims=_csv_list(args.dims) or [10, 20, 50, 100],
        )
        write_csv(args.recognition, curve.to_frame())
        if args.recognition_plot:
            charts.write_chart(args.recognition_plot, charts.recognition_chart(curve.to_frame()))

    if args.excel:
        atomic_write(args.excel, ev.export_report_excel(report, curve))
    if args.plot:
        charts.write_chart(args.plot, charts.smoothing_chart(report.means))
    return 0


def cmd_selfcheck(args: argparse.Namespace) -> int:
    config = _config(args)
    results = run_selfcheck(quick=args.quick, seed=config.seed)
    for row in results.itertuples():
        print(f"{'PASS' if row.passed else 'FAIL'}  {row.check:<36} {row.detail}")
    return 0 if results["passed"].all() else 1


# ============ PARSER ============

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--precision", choices=["float32", "float64"])
    common.add_argument("--seed", type=int)
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")

    parser = argparse.ArgumentParser(prog="sketchforge", description="Semi-supervised face sketch synthesis")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", parents=[common], help="align photos to 250x200 crops")
    p.add_argument("--photos", type=Path)
    p.add_argument("--landmarks", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--keep-aligned", action="store_true", help="pass through 250x200 images without landmarks")
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("init-extractor", parents=[common], help="write a randomly initialized extractor")
    p.add_argument("--extractor", type=Path, help="output weight file")
    p.add_argument("--width-scale", type=float, default=1.0, help="scale the VGG-19 channel widths")
    p.set_defaults(func=cmd_init_extractor)

    p = sub.add_parser("build-ref", parents=[common], help="build the reference store")
    p.add_argument("--photos", type=Path)
    p.add_argument("--sketches", type=Path)
    p.add_argument("--extractor", type=Path)
    p.add_argument("--store", type=Path)
    p.add_argument("--patch-k", dest="patch_k", type=int)
    p.add_argument("--pm-layers", dest="pm_layers", type=_split)
    p.set_defaults(func=cmd_build_ref)

    p = sub.add_parser("match", parents=[common], help="match one photo against the store")
    p.add_argument("photo", type=Path)
    p.add_argument("--store", type=Path)
    p.add_argument("--extractor", type=Path)
    p.add_argument("--tap", default="relu3_1")
    p.add_argument("--k-ref", dest="k_ref", type=int)
    p.add_argument("--out", help="match table CSV")
    p.add_argument("--dump-pixels", help="PGM of the matched sketch pixels")
    p.add_argument("--dump-feature", help="PGM of the folded pseudo feature (channel mean)")
    p.add_argument("--sketch", type=Path, help="true sketch shown beside --dump-feature")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("train", parents=[common], help="train the generator")
    p.add_argument("--photos", type=Path)
    p.add_argument("--store", type=Path)
    p.add_argument("--extractor", type=Path)
    p.add_argument("--checkpoints", type=Path)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--progress", action="store_true", default=None)
    p.add_argument("--history", help="history CSV (default: <checkpoints>/history.csv)")
    p.add_argument("--plot", help="HTML chart of the loss history")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", parents=[common], help="synthesize sketches")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--photos", type=Path, help="photo file or directory")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", parents=[common], help="SSIM/FSIM and recognition")
    p.add_argument("--pairs", required=True, help="CSV with synthesized, ground_truth (and optional name, label)")
    p.add_argument("--out", help="metrics CSV (default: metrics.csv beside the list)")
    p.add_argument("--smooth", action="store_true", help="also score bilateral-smoothed sketches")
    p.add_argument("--excel", help="workbook with every table")
    p.add_argument("--plot", help="HTML chart of the mean scores")
    p.add_argument("--recognition", help="recognition curve CSV")
    p.add_argument("--recognition-plot", help="HTML chart of the recognition curve")
    p.add_argument("--dims", help="comma-separated discriminant counts")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selfcheck", parents=[common], help="gradient and matcher self-verification")
    p.add_argument("--quick", action="store_true")
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        return args.func(args)
    except ConfigError as e:
        print(f"sketchforge {args.command}: {e}", file=sys.stderr)
        return 2
    except VersionMismatchError as e:
        print(f"sketchforge {args.command}: {e} [{e.kind}: found {e.found}, expected {e.expected}]",
              file=sys.stderr)
        return 1
    except (SketchForgeError, OSError) as e:
        print(f"sketchforge {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
