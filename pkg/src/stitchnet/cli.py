"""``stitchnet`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numeric failure.
Verbosity comes from the STITCHNET_LOG environment variable (error, info, debug).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path


from . import classifier, nncore, pipeline, regressor, synthdata, volume

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("stitchnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad arguments; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _setup_logging():
    name = os.environ.get("STITCHNET_LOG", "info").strip().lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if name not in levels:
        raise UsageError(f"STITCHNET_LOG must be one of error, info, debug; got {name!r}")
    logging.basicConfig(level=levels[name], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr,
                        force=True)


def _config(args):
    cfg = pipeline.load_config(args.config)
    if getattr(args, "data", None):
        cfg.data_dir = Path(args.data)
    if getattr(args, "out", None):
        cfg.output_dir = Path(args.out)
    if getattr(args, "n", None) is not None:
        cfg.synth_n = args.n
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg.synth_seed = seed
        cfg.classifier = replace(cfg.classifier, seed=seed)
        cfg.regressor = replace(cfg.regressor, seed=seed)
        cfg.noise_seed = seed
    if getattr(args, "threshold", None) is not None:
        cfg.classifier = replace(cfg.classifier, threshold=args.threshold)
    if getattr(args, "class_", None):
        cfg.saliency_class = args.class_
    return cfg


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    cfg = _config(args)
    if cfg.synth_n < 2:
        raise UsageError("need ≥ 2 subjects")
    # for synth, --out names the cohort directory itself
    out = Path(args.out) if args.out else cfg.data_dir
    out, cohort = pipeline.run_synth(cfg, out)
    print(f"wrote {len(cohort.volumes)} subjects to {out}")


def cmd_stitch(args):
    cfg = _config(args)
    out, cohort = pipeline.run_stitch(cfg)
    g = cohort.layout
    print(f"stitched {len(cohort.volumes)} volumes into {g.grid[0]}x{g.grid[1]} mosaics under {out}")


def cmd_train_classifier(args):
    cfg = _config(args)
    t0 = time.perf_counter()
    cv, holdout, model = pipeline.run_train_classifier(cfg)
    for i, acc in enumerate(cv.fold_accuracies):
        print(f"fold {i + 1}: accuracy {acc:.4f}")
    print(f"mean CV accuracy {cv.mean_accuracy:.4f}")
    print(f"held-out accuracy {holdout:.4f}")
    log.info("training took %.1f s", time.perf_counter() - t0)


def cmd_extract_features(args):
    cfg = _config(args)
    path, feats = pipeline.run_extract_features(cfg)
    print(f"wrote {feats.shape[0]}x{feats.shape[1]} features to {path}")


def cmd_evaluate(args):
    cfg = _config(args)
    path, reports = pipeline.run_evaluate(cfg)
    print(f"{'feature set':<18} {'R2':>8} {'pearson':>8}")
    for r in reports:
        print(f"{r.feature_set_tag:<18} {r.r_squared:8.4f} {r.pearson_r:8.4f}")
    print(f"wrote {path}")


def cmd_saliency(args):
    cfg = _config(args)
    paths, _, _ = pipeline.run_saliency(cfg)
    for name in ("mosaic", "axial", "sagittal", "coronal", "volume"):
        print(f"{name}: {paths[name]}")


def cmd_analyze(args):
    cfg = _config(args)
    pca, _, d_tissue, d_noise = pipeline.run_analyze(cfg)
    ev = pca.explained_variance
    print(f"PC variances {ev[0]:.6g} {ev[1]:.6g}")
    print(f"dCor(features, tissue) {d_tissue:.4f}")
    print(f"dCor(features, noise)  {d_noise:.4f}")


def cmd_model_summary(args):
    cfg = _config(args)
    path = Path(args.checkpoint) if args.checkpoint else cfg.output_dir / "classifier.snet"
    if args.checkpoint or path.exists():
        if not path.exists():
            raise pipeline.DataError(f"missing checkpoint {path}")
        model = classifier.load_checkpoint(path)
        print(classifier.model_summary(model))
    else:
        print(classifier.model_summary(cfg.classifier))


def cmd_predict(args):
    cfg = _config(args)
    path = Path(args.checkpoint) if args.checkpoint else cfg.output_dir / "classifier.snet"
    if not path.exists():
        raise pipeline.DataError(f"missing checkpoint {path}")
    model = classifier.load_checkpoint(path)
    pre = model.preprocessing
    for vpath in args.volumes:
        vol = volume.load_volume(vpath)
        if pre:
            layout = volume.MosaicLayout.from_dict(pre["layout"])
            if volume.MosaicLayout.for_dims(*vol.dims) != layout:
                raise pipeline.DataError(f"{vpath}: dims {vol.dims} do not match the training cohort")
            lo, hi = pre["intensity_min"], pre["intensity_max"]
        else:
            lo, hi = volume.intensity_range([vol])
        grid, _ = volume.prepare_input(vol, model.config.input_size, lo, hi)
        p, z = classifier.predict(model, grid)
        label = "above" if z >= 0 else "below"
        print(f"{vpath}\t{p!r}\t{z!r}\t{label}")


# ---------------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="stitchnet", description="Stitched-slice CNN pipeline for lesioned brain volumes.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, func, help_, out_help="output directory"):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", help="TOML pipeline config")
        p.add_argument("--out", help=out_help)
        p.set_defaults(func=func)
        return p

    def with_data(p):
        p.add_argument("--data", help="cohort directory (overrides paths.data_dir)")
        return p

    p = add("synth", cmd_synth, "generate a synthetic phantom cohort", "cohort directory to write")
    p.add_argument("--n", type=int, help="number of subjects")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--threshold", type=float, help="class threshold the cohort is balanced around")

    with_data(add("stitch", cmd_stitch, "write each volume as a stitched PGM mosaic"))

    p = with_data(add("train-classifier", cmd_train_classifier, "cross-validate and train the classifier"))
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--threshold", type=float, help="score threshold between the classes")

    with_data(add("extract-features", cmd_extract_features, "write 64-d image features per subject"))

    p = with_data(add("evaluate", cmd_evaluate, "score regressors on each feature set"))
    p.add_argument("--seed", type=int, help="random seed")

    p = with_data(add("saliency", cmd_saliency, "class-average saliency map and projections"))
    p.add_argument("--class", dest="class_", choices=("below", "above"), help="which class to average")

    p = with_data(add("analyze", cmd_analyze, "PCA projection and distance correlation report"))
    p.add_argument("--seed", type=int, help="seed for the noise comparison")

    p = add("model-summary", cmd_model_summary, "print layer shapes and parameter counts")
    p.add_argument("--checkpoint", help="SNET checkpoint (default: <out>/classifier.snet if present)")

    p = add("predict", cmd_predict, "classify volumes with a trained checkpoint")
    p.add_argument("--checkpoint", help="SNET checkpoint (default: <out>/classifier.snet)")
    p.add_argument("volumes", nargs="+", help=".raw or .nii volume files")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _setup_logging()
        args.func(args)
    except (UsageError, pipeline.ConfigError) as exc:
        print(f"stitchnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (nncore.NonFiniteError, ArithmeticError, FloatingPointError) as exc:
        print(f"stitchnet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (pipeline.DataError, volume.VolumeFormatError, volume.CohortAlignmentError, volume.LayoutError,
            classifier.CheckpointError, synthdata.PhantomSpecError, regressor.MetricError,
            OSError, ValueError) as exc:
        print(f"stitchnet: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
