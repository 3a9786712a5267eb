"""Command-line front end: ``medsegpipe <subcommand> --config <path> ...``.

Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 runtime
failure.  Progress goes to standard error; results go to files (``info``
prints its dump to standard output).
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .batching import load_preprocessed
from .config import load_config
from .errors import DataError, PipelineError, UnknownId
from .evaluate import (
    FoldError,
    analyze_dataset,
    evaluate_samples,
    metric_columns,
    run_cross_validation,
)
from .model import ReferenceModel, fit, predict
from .nifti_io import NiftiSampleIO, load_nifti, save_nifti
from .synthetic import write_phantom_dataset
from .tsv import write_tsv

log = logging.getLogger("medsegpipe")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _fmt_num(x):
    return f"{float(x):g}"


def _ids_arg(text):
    return [s.strip() for s in text.split(",") if s.strip()]


def _resolve_ids(args, sample_io, default=None, labeled_only=False):
    known = sample_io.sample_ids()
    if args.ids:
        ids = args.ids
        unknown = sorted(set(ids) - set(known))
        if unknown:
            raise UnknownId(f"unknown sample ids: {', '.join(unknown)}")
    elif default:
        ids = list(default)
    else:
        ids = known
    if labeled_only:
        ids = [i for i in ids if sample_io.has_labels(i)]
    if not ids:
        raise DataError(f"no matching samples under {sample_io.data_dir}")
    return ids


def _setup(args):
    config = load_config(args.config)
    return config, NiftiSampleIO(config.data_dir, config.output_dir, config.n_classes)


def _model_path(args, config):
    return Path(args.model) if args.model else Path(config.output_dir) / "model.mscm"


# subcommands


def cmd_info(args):
    header, image = load_nifti(args.file)
    data = np.asarray(image.data, dtype=np.float64)
    rank = header.rank
    print(f"file {args.file}")
    print("dims " + " ".join(str(d) for d in header.dim[1 : rank + 1]))
    print(f"datatype {header.datatype_name}")
    print("spacing " + " ".join(_fmt_num(s) for s in header.pixdim[1 : rank + 1]))
    print(f"endian {'little' if header.endian == '<' else 'big'}")
    print(f"scl_slope {_fmt_num(header.scl_slope)}")
    print(f"scl_inter {_fmt_num(header.scl_inter)}")
    print(f"min {_fmt_num(data.min())}")
    print(f"max {_fmt_num(data.max())}")
    print(f"mean {_fmt_num(data.mean())}")
    print(f"std {_fmt_num(data.std())}")
    return EXIT_OK


def cmd_preprocess(args):
    config, sample_io = _setup(args)
    out_root = Path(config.output_dir) / "preprocessed"
    for sid in _resolve_ids(args, sample_io):
        image, labels = load_preprocessed(sample_io, sid, config, require_labels=False)
        save_nifti(out_root / sid / "imaging.nii", image)
        if labels is not None:
            save_nifti(out_root / sid / "segmentation.nii", labels)
        log.info("preprocessed %s -> %s", sid, out_root / sid)
    return EXIT_OK


def cmd_train(args):
    config, sample_io = _setup(args)
    ids = _resolve_ids(args, sample_io, config.train_ids, labeled_only=True)
    model = ReferenceModel().initialize(config)
    fit(model, sample_io, ids, config, fitting_path=Path(config.output_dir) / "fitting.tsv")
    path = model.save(_model_path(args, config))
    log.info("saved model to %s", path)
    return EXIT_OK


def cmd_predict(args):
    config, sample_io = _setup(args)
    model = ReferenceModel.load(_model_path(args, config))
    for sid in _resolve_ids(args, sample_io, config.test_ids):
        image, _ = sample_io.load_sample(sid)
        predict(model, image, config, sample_io, sid)
        log.info("predicted %s -> %s", sid, sample_io.prediction_path(sid))
    return EXIT_OK


def cmd_evaluate(args):
    config, sample_io = _setup(args)
    model = ReferenceModel.load(_model_path(args, config))
    ids = _resolve_ids(args, sample_io, config.test_ids, labeled_only=True)
    overlay_dir = Path(config.output_dir) / "overlays" if config.overlay else None
    rows = evaluate_samples(model, sample_io, ids, config, overlay_dir)
    columns = metric_columns(config.n_classes)
    table = [[r["sample_id"]] + [r[c] for c in columns] for r in rows]
    table.append(["mean"] + [float(np.mean([r[c] for r in rows])) for c in columns])
    path = write_tsv(Path(config.output_dir) / "model_evaluation.tsv", ["sample_id"] + columns, table)
    log.info("wrote %s", path)
    return EXIT_OK


def cmd_crossval(args):
    config, sample_io = _setup(args)
    report = run_cross_validation(config, sample_io)
    log.info("wrote %s", report["report"])
    return EXIT_OK


def cmd_analyze(args):
    config, sample_io = _setup(args)
    ids = _resolve_ids(args, sample_io)
    path = Path(config.output_dir) / "analysis.tsv"
    analyze_dataset(sample_io, ids, path)
    log.info("wrote %s", path)
    return EXIT_OK


def cmd_synth(args):
    ids = write_phantom_dataset(
        args.directory,
        args.count,
        seed=args.seed,
        shape=tuple(args.shape),
        n_classes=args.classes,
    )
    log.info("wrote %d phantoms to %s", len(ids), args.directory)
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="medsegpipe", description="Medical image segmentation pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = parser.add_subparsers(dest="command", metavar="<subcommand>", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("info", help="dump a NIfTI header and intensity statistics")
    p.add_argument("file")
    p.set_defaults(func=cmd_info)

    def with_config(name, func, help, model=False):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", required=True, help="pipeline config file")
        if model:
            p.add_argument("--model", help="model file (default <output_dir>/model.mscm)")
        p.add_argument("--ids", type=_ids_arg, help="comma-separated sample ids")
        p.set_defaults(func=func)
        return p

    with_config("preprocess", cmd_preprocess, "write preprocessed volumes")
    with_config("train", cmd_train, "fit a model and save it", model=True)
    with_config("predict", cmd_predict, "segment samples with a saved model", model=True)
    with_config("evaluate", cmd_evaluate, "score a saved model on labeled samples", model=True)
    with_config("crossval", cmd_crossval, "run the configured automatic evaluation")
    with_config("analyze", cmd_analyze, "intensity and class-frequency statistics")

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.add_argument("directory")
    p.add_argument("--count", type=int, default=12)
    p.add_argument("--shape", type=int, nargs=3, default=(32, 32, 32))
    p.add_argument("--classes", type=int, choices=(2, 3), default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def _exit_code(exc):
    if isinstance(exc, FoldError):
        exc = exc.cause
    if isinstance(exc, (DataError, OSError)):
        return EXIT_DATA
    return EXIT_RUNTIME


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"medsegpipe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (PipelineError, OSError) as exc:
        print(f"medsegpipe: error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    except Exception as exc:  # unexpected runtime failure, still a one-line diagnostic
        print(f"medsegpipe: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
