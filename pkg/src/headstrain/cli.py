"""Command line interface for dataset generation, training, and evaluation.

Exit codes: 0 success, 1 usage error, 2 data or file-format error,
3 numeric failure. Errors print one machine-parseable line to stderr:
``headstrain: error [<category>] <message>`` with category usage,
data-format, or numeric. Progress goes to stdout; reports go to files.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .errors import (
    ChecksumError,
    FileFormatError,
    IncompatibilityError,
    InsufficientDataError,
    InvalidDataError,
    InvalidParameterError,
    NumericError,
    TrainingDivergedError,
    TruncatedFileError,
    VersionError,
)
from .features import extract_feature_matrix
from .nn import TrainConfig
from .oracle import (
    REGION_CODES,
    build_dataset,
    get_profile,
    load_profiles,
    sample_surrogate_config,
)
from .signals import read_recording_csv
from .storage import (
    WORKSPACE_ENV_VAR,
    list_shipped_plans,
    load_dataset,
    load_plan,
    load_shipped_plan,
    load_workspace,
    save_dataset,
    write_feature_matrix,
    write_feature_table,
    write_label_matrix,
)
from .strategies import (
    canonical_quantity,
    default_train_config,
    fine_tune,
    fusion_train,
    load_bundle,
    partition_indices,
    predict,
    pretrain,
    save_bundle,
    scratch_train,
)
from .evaluation import select_median_example

PLOTDATA_VERSION = 1

_DATA_ERRORS = (
    InvalidDataError,
    IncompatibilityError,
    InsufficientDataError,
    FileFormatError,
    VersionError,
    ChecksumError,
    TruncatedFileError,
)
_NUMERIC_ERRORS = (NumericError, TrainingDivergedError, FloatingPointError)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; the contract reserves 2 for data
    # errors, so usage failures are rethrown and mapped to exit code 1
    def error(self, message):
        raise _UsageError(f"{message}\n{self.format_usage()}".rstrip())


def _csv_ints(text):
    try:
        return tuple(int(tok) for tok in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _csv_floats(text):
    try:
        return tuple(float(tok) for tok in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


# ---------------------------------------------------------------------------
# shared handler plumbing


def _labels_for(ds, quantity):
    return ds.mps if canonical_quantity(quantity) == "mps" else ds.mpsr


def _train_config(args, quantity):
    cfg = default_train_config(quantity, epochs=args.epochs, seed=args.seed,
                               batch_size=args.batch_size)
    lr = args.lr if args.lr is not None else cfg.learning_rate
    l2 = args.l2 if args.l2 is not None else cfg.l2_lambda
    return TrainConfig(learning_rate=lr, epochs=cfg.epochs, batch_size=cfg.batch_size,
                       l2_lambda=l2, seed=cfg.seed)


def element_coordinates(region_map):
    """Deterministic synthetic 3-D layout: regions form contiguous bands of a
    Fibonacci sphere, so every region is a spatially coherent cluster."""
    codes = np.asarray(region_map)
    n = codes.size
    if n == 0:
        raise InvalidDataError("empty region map")
    order = np.argsort(codes, kind="stable")
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = i * (np.pi * (3.0 - np.sqrt(5.0)))
    pts = np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    out = np.empty((n, 3))
    out[order] = pts
    return out


# ---------------------------------------------------------------------------
# subcommand handlers


def _cmd_generate(args):
    profile = get_profile(args.profile)
    spec = None
    if args.surrogate_config is not None:
        try:
            with open(args.surrogate_config, "r", encoding="ascii") as fh:
                spec = json.load(fh)
        except OSError as exc:
            raise InvalidDataError(f"cannot read surrogate config: {exc}")
        except json.JSONDecodeError:
            raise FileFormatError(f"{args.surrogate_config}: not a JSON surrogate config")
    cfg = sample_surrogate_config(
        n_elements=args.elements, seed=args.brain_seed,
        freq_scale=args.freq_scale, damping_scale=args.damping_scale,
        gain_scale=args.gain_scale, spec=spec,
    )
    print(f"generating {args.n} impacts with profile {args.profile} "
          f"(seed {args.seed}, {args.elements} elements)")
    ds = build_dataset(profile, args.n, cfg, seed=args.seed, augment=args.augment)
    save_dataset(ds, args.out)
    print(f"wrote {args.out}: {ds.n_recordings} recordings, "
          f"fingerprint {ds.manifest['config_fingerprint'][:12]}")
    return 0


def _cmd_features(args):
    ds = load_dataset(args.dataset)
    print(f"extracting features for {ds.n_recordings} recordings")
    X = extract_feature_matrix(ds.recordings)
    write_feature_matrix(args.out, X)
    print(f"wrote {args.out}: shape {X.shape}")
    if args.table is not None:
        write_feature_table(args.table, X)
        print(f"wrote {args.table} (text table)")
    return 0


def _cmd_pretrain(args):
    ds = load_dataset(args.dataset)
    cfg = _train_config(args, args.quantity)
    print(f"pretraining {args.quantity} on {ds.n_recordings} impacts "
          f"({cfg.epochs} epochs, lr {cfg.learning_rate}, seed {cfg.seed})")
    bundle = pretrain(ds, args.quantity, cfg, split_seed=args.split_seed)
    save_bundle(bundle, args.out)
    print(f"wrote {args.out}: final train loss "
          f"{bundle.provenance['final_train_loss']:.6g}")
    return 0


def _cmd_adapt(args):
    onfield = load_dataset(args.train_data)
    labels = _labels_for(onfield, args.quantity)
    X = extract_feature_matrix(onfield.recordings)
    split_seed = args.split_seed if args.split_seed is not None else args.seed
    rng = np.random.default_rng([int(split_seed), 12])
    tr, va, _ = partition_indices(onfield.n_recordings, args.ratios, rng)
    train_pair = (X[tr], labels[tr])
    tag = onfield.manifest.get("profile", "onfield")
    print(f"adapting mode={args.mode} quantity={args.quantity} "
          f"({len(tr)} train / {len(va)} validation impacts, seed {args.seed})")

    if args.mode == "scratch":
        cfg = _train_config(args, args.quantity)
        bundle = scratch_train(train_pair, args.whiten, args.quantity, cfg,
                               dataset_tag=tag)
    elif args.mode == "fusion":
        if args.basis_data is None:
            raise InvalidParameterError("--basis-data is required for fusion")
        basis_ds = load_dataset(args.basis_data)
        cfg = _train_config(args, args.quantity)
        bundle = fusion_train(basis_ds, train_pair, args.whiten, args.quantity,
                              cfg, split_seed=split_seed, dataset_tag=tag)
    else:
        if args.basis_bundle is None or args.basis_data is None:
            raise InvalidParameterError(
                "--basis-bundle and --basis-data are required for transfer"
            )
        basis = load_bundle(args.basis_bundle)
        if canonical_quantity(args.quantity) != basis.quantity:
            raise IncompatibilityError(
                f"basis bundle predicts {basis.quantity}, requested {args.quantity}"
            )
        basis_ds = load_dataset(args.basis_data)
        basis_X = extract_feature_matrix(basis_ds.recordings)
        bundle = fine_tune(basis, train_pair, (X[va], labels[va]), basis_X,
                           freeze_grid=args.freeze_grid, lr_grid=args.lr_grid,
                           epoch_grid=args.epoch_grid, seed=args.seed,
                           dataset_tag=tag)
        sel = bundle.provenance["selected"]
        print(f"selected grid point: freeze {sel['freeze']}, "
              f"lr {sel['learning_rate']}, epochs {sel['epochs']}")
    save_bundle(bundle, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_predict(args):
    bundle = load_bundle(args.bundle)
    if args.dataset is not None:
        ds = load_dataset(args.dataset)
        recordings = ds.recordings
        fingerprint = ds.manifest.get("config_fingerprint", "")
    else:
        name = os.path.splitext(os.path.basename(args.recording))[0]
        recordings = [read_recording_csv(args.recording, name, "cli")]
        fingerprint = ""
    print(f"predicting {bundle.quantity} for {len(recordings)} recordings")
    pred, flags = predict(bundle, recordings)
    if flags.any():
        bad = [recordings[i].id for i in np.nonzero(flags)[0]]
        raise NumericError(
            f"non-finite predictions for {int(flags.sum())} recordings: {bad[:5]}"
        )
    write_label_matrix(args.out, pred.astype(np.float64), bundle.quantity,
                       fingerprint=fingerprint)
    print(f"wrote {args.out}: shape {pred.shape}")
    return 0


def _cmd_evaluate(args):
    if args.list_plans:
        for name in list_shipped_plans():
            print(name)
        return 0
    if (args.plan is None) == (args.shipped is None):
        raise InvalidParameterError("pass exactly one of --plan or --shipped")
    # imported here so light commands stay importable without pulling in the
    # process-pool machinery
    from .evaluation import run_experiments

    plan = load_plan(args.plan) if args.plan else load_shipped_plan(args.shipped)
    out = args.out
    if out is None:
        ws = load_workspace(args.workspace)
        os.makedirs(ws.path("reports"), exist_ok=True)
        out = os.path.join(ws.path("reports"), f"{plan.name}.json")
    total = plan.n_runs * len(plan.ratio_schedule())
    print(f"running plan {plan.name}: {plan.n_runs} runs x "
          f"{len(plan.ratio_schedule())} ratio points, jobs={args.jobs}")

    done = [0]

    def progress(ratios, run_index):
        done[0] += 1
        print(f"  run {done[0]}/{total} complete (ratios {ratios}, run {run_index})",
              flush=True)

    report = run_experiments(plan, jobs=args.jobs,
                             progress=progress if args.jobs == 1 else None)
    with open(out, "wb") as fh:
        fh.write(report.to_json_bytes())
    print(f"wrote {out}")
    return 0


def _cmd_export_plots(args):
    bundle = load_bundle(args.bundle)
    ds = load_dataset(args.dataset)
    region_map = ds.manifest.get("region_map")
    if region_map is None:
        raise InvalidDataError("dataset manifest carries no region map")
    labels = _labels_for(ds, bundle.quantity)
    print(f"predicting {bundle.quantity} for {ds.n_recordings} recordings")
    pred, flags = predict(bundle, ds.recordings)
    usable = np.nonzero(~flags)[0]
    if usable.size == 0:
        raise NumericError("every prediction is non-finite; nothing to plot")
    chosen = usable[select_median_example(pred[usable], q=args.percentile)]
    rec_id = ds.recordings[chosen].id
    fingerprint = ds.manifest.get("config_fingerprint", "")
    os.makedirs(args.out_dir, exist_ok=True)

    coords = element_coordinates(region_map)
    meta = (f"# headstrain-plotdata {PLOTDATA_VERSION} quantity={bundle.quantity} "
            f"fingerprint={fingerprint} impact={rec_id} percentile={args.percentile!r}\n")

    cloud_path = os.path.join(args.out_dir, "pointcloud.csv")
    with open(cloud_path, "w", encoding="ascii") as fh:
        fh.write(meta + "element,x,y,z,reference,predicted\n")
        for e in range(coords.shape[0]):
            fh.write(f"{e},{coords[e, 0]!r},{coords[e, 1]!r},{coords[e, 2]!r},"
                     f"{labels[chosen, e]!r},{float(pred[chosen, e])!r}\n")

    violin_path = os.path.join(args.out_dir, "violin.csv")
    with open(violin_path, "w", encoding="ascii") as fh:
        fh.write(meta + "region,kind,value\n")
        for code in REGION_CODES:
            idx = [e for e, c in enumerate(region_map) if c == code]
            for e in idx:
                fh.write(f"{code},reference,{labels[chosen, e]!r}\n")
            for e in idx:
                fh.write(f"{code},predicted,{float(pred[chosen, e])!r}\n")

    print(f"selected impact {rec_id} (median {args.percentile!r}th percentile)")
    print(f"wrote {cloud_path}")
    print(f"wrote {violin_path}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="headstrain",
        description="Surrogate modeling of per-element brain strain from "
                    "head-impact kinematics.",
    )
    parser.add_argument("--version", action="version", version=f"headstrain {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("generate", help="build a synthetic impact dataset from a profile")
    p.add_argument("--profile", required=True, metavar="NAME",
                   help=f"impact profile preset ({', '.join(sorted(load_profiles()))})")
    p.add_argument("--n", type=int, required=True, help="number of source impacts")
    p.add_argument("--out", required=True, help="output dataset folder")
    p.add_argument("--seed", type=int, default=0, help="generator seed (recorded in the manifest)")
    p.add_argument("--elements", type=int, default=256, help="surrogate brain element count")
    p.add_argument("--brain-seed", type=int, default=0, help="surrogate parameter-sampling seed")
    p.add_argument("--freq-scale", type=float, default=1.0, help="frequency multiplier for domain shift")
    p.add_argument("--damping-scale", type=float, default=1.0, help="damping multiplier for domain shift")
    p.add_argument("--gain-scale", type=float, default=1.0, help="gain multiplier for domain shift")
    p.add_argument("--surrogate-config", metavar="FILE", default=None,
                   help="override the shipped surrogate sampling config")
    p.add_argument("--augment", action="store_true",
                   help="add the 12 signed-axis permutations of every impact")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("features", help="extract the 510-feature matrix for a dataset")
    p.add_argument("--dataset", required=True, help="dataset folder")
    p.add_argument("--out", required=True, help="output feature-matrix file")
    p.add_argument("--table", default=None, metavar="FILE",
                   help="also write a text table for debugging")
    p.set_defaults(func=_cmd_features)

    p = sub.add_parser("pretrain", help="train a basis predictor on a simulated dataset")
    p.add_argument("--dataset", required=True, help="dataset folder")
    p.add_argument("--quantity", required=True, choices=("mps", "mpsr"))
    p.add_argument("--out", required=True, help="output bundle file")
    p.add_argument("--epochs", type=int, default=3000)
    p.add_argument("--seed", type=int, default=0, help="training seed (recorded in provenance)")
    p.add_argument("--split-seed", type=int, default=None,
                   help="70/15/15 split seed (defaults to --seed)")
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=None, help="learning rate (default per quantity)")
    p.add_argument("--l2", type=float, default=None, help="L2 penalty (default per quantity)")
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("adapt", help="adapt to an on-field dataset "
                                     "(transfer, fusion, or scratch)")
    p.add_argument("--mode", required=True, choices=("transfer", "fusion", "scratch"))
    p.add_argument("--train-data", required=True, help="on-field dataset folder")
    p.add_argument("--quantity", required=True, choices=("mps", "mpsr"))
    p.add_argument("--out", required=True, help="output bundle file")
    p.add_argument("--basis-bundle", default=None, help="pretrained bundle (transfer)")
    p.add_argument("--basis-data", default=None,
                   help="simulated dataset folder (transfer and fusion)")
    p.add_argument("--whiten", action="store_true",
                   help="per-element label whitening (scratch and fusion)")
    p.add_argument("--freeze-grid", type=_csv_ints, default=(0, 1, 2), metavar="K,K,...",
                   help="frozen-layer counts searched by transfer (default 0,1,2)")
    p.add_argument("--lr-grid", type=_csv_floats, default=None, metavar="LR,LR,...",
                   help="fine-tuning learning rates (default: basis lr x 1, 1/3, 1/10)")
    p.add_argument("--epoch-grid", type=_csv_ints, default=(100, 300, 1000), metavar="E,E,...",
                   help="fine-tuning epoch counts (default 100,300,1000)")
    p.add_argument("--ratios", type=_csv_floats, default=(0.70, 0.15, 0.15),
                   metavar="TR,VA,TE", help="train/validation/test split ratios")
    p.add_argument("--seed", type=int, default=0, help="training seed")
    p.add_argument("--split-seed", type=int, default=None,
                   help="partition seed (defaults to --seed)")
    p.add_argument("--epochs", type=int, default=3000, help="epochs (scratch and fusion)")
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=None, help="learning rate (default per quantity)")
    p.add_argument("--l2", type=float, default=None, help="L2 penalty (default per quantity)")
    p.set_defaults(func=_cmd_adapt)

    p = sub.add_parser("predict", help="predict strain fields with a saved bundle")
    p.add_argument("--bundle", required=True, help="predictor bundle file")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--dataset", help="dataset folder to predict")
    group.add_argument("--recording", help="single recording CSV to predict")
    p.add_argument("--out", required=True, help="output label-matrix file")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("evaluate", help="run an experiment plan and write its report")
    p.add_argument("--plan", default=None, help="experiment plan JSON file")
    p.add_argument("--shipped", default=None, metavar="NAME",
                   help="name of a shipped plan (see --list-plans)")
    p.add_argument("--list-plans", action="store_true", help="list shipped plans and exit")
    p.add_argument("--out", default=None, help="report path (default: workspace reports folder)")
    p.add_argument("--jobs", type=int, default=1, help="concurrent experiment runs")
    p.add_argument("--workspace", default=None,
                   help=f"workspace root (default: ${WORKSPACE_ENV_VAR} or cwd)")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("export-plots", help="emit plot-data tables "
                                            "(point cloud and per-region violin)")
    p.add_argument("--bundle", required=True, help="predictor bundle file")
    p.add_argument("--dataset", required=True, help="dataset folder with reference labels")
    p.add_argument("--out-dir", required=True, help="folder for the emitted tables")
    p.add_argument("--percentile", type=float, default=95.0,
                   help="impact-selection percentile (default 95)")
    p.set_defaults(func=_cmd_export_plots)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"headstrain: error [usage] {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"headstrain: error [usage] {exc}", file=sys.stderr)
        return 1
    except InvalidParameterError as exc:
        print(f"headstrain: error [usage] {exc}", file=sys.stderr)
        return 1
    except _DATA_ERRORS as exc:
        print(f"headstrain: error [data-format] {exc}", file=sys.stderr)
        return 2
    except _NUMERIC_ERRORS as exc:
        print(f"headstrain: error [numeric] {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"headstrain: error [data-format] {exc}", file=sys.stderr)
        return 2


def console_entry():
    sys.exit(main())


if __name__ == "__main__":
    console_entry()
