"""Command-line entry point: ``sparsesub {sparsify,train,impute,experiment}``.

Exit codes: 0 success, 2 usage error, 3 data or I/O error, 4 numeric divergence.
``SSUB_THREADS`` caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import (
    DATASET_MAGIC,
    MaskSpec,
    checkpoint_load,
    checkpoint_save,
    dataset_load,
    dataset_save,
    encode_container,
    load_idx,
    make_variant,
    sparsify,
    split,
    tile,
    write_pgm,
)
from .errors import DataFormatError, DivergenceError, NonFiniteError, ShapeError
from .experiments import (
    METHODS,
    Cell,
    ComparisonSettings,
    ExperimentReport,
    fit_method,
    prepare_cell,
    run_comparison_experiment,
    run_dip_experiment,
    run_fc_projection_experiment,
)
from .impute import impute_conditional_mean, impute_samples, per_image_mse
from .linear import LinearModel
from .model import ModelConfig, SubspaceModel

log = logging.getLogger("sparsesub")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

SOURCES = {
    "mnist": ("mnist-train-images-idx3-ubyte.gz", "mnist-train-labels-idx1-ubyte.gz"),
    "mnist-test": ("mnist-t10k-images-idx3-ubyte.gz", "mnist-t10k-labels-idx1-ubyte.gz"),
    "fashion": ("fashion-images-idx3-ubyte.gz", "fashion-labels-idx1-ubyte.gz"),
}


class UsageError(Exception):
    pass


def data_dir(args=None):
    explicit = getattr(args, "data_dir", None)
    return Path(explicit or os.environ.get("SSUB_DATA", "data"))


def load_named(variant, directory, seed, limit=None):
    """Dense dataset for a benchmark variant from the IDX files in ``directory``."""
    source = "fashion" if variant == "fashion" else "mnist"
    images, labels = SOURCES[source]
    base = load_idx(Path(directory) / images, Path(directory) / labels)
    out = make_variant(base, variant, T.SeededRng(seed))
    return out.subset(slice(0, limit)) if limit else out


def _floats(text):
    return [float(v) for v in text.split(",") if v]


def _mask_spec(text):
    try:
        return MaskSpec.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v)


# ---------------------------------------------------------------- subcommands


def cmd_sparsify(args):
    if args.input:
        base = load_idx(args.input, args.labels)
        dense = make_variant(base, args.variant, T.SeededRng(args.seed))
    else:
        dense = load_named(args.variant, data_dir(args), args.seed)
    if args.limit:
        dense = dense.subset(slice(0, args.limit))
    sparse = sparsify(dense, args.mask, args.seed)
    if args.split != "all":
        parts = dict(zip(("train", "val", "test"), split(sparse, _floats(args.fractions), args.seed)))
        sparse = parts[args.split]
    dataset_save(sparse, args.out, {"seed": args.seed, "source": args.input or args.variant})
    print(f"wrote {len(sparse)} images to {args.out}")
    return EXIT_OK


def _model_settings(args):
    return ComparisonSettings(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, sigma2=args.sigma2,
        channels=_ints(args.channels), latent_channels=args.latent_channels, latent_dim=args.latent_dim,
        linear_d=args.latent_dim, linear_sigma2=args.sigma2, linear_epochs=args.epochs, em_iters=args.epochs,
        k_impute=args.k)


def _write_manifest(path, entries):
    Path(path).write_text("".join(f"{k}={entries[k]}\n" for k in sorted(entries)))


def cmd_train(args):
    train_set = dataset_load(args.data)
    val_set = dataset_load(args.val) if args.val else train_set.subset(slice(0, 0))
    settings = _model_settings(args)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = []

    def on_epoch(epoch, train_loss, val_loss):
        rows.append((epoch, train_loss, val_loss))

    cell = Cell("cli", 0.0, train_set, val_set, val_set)
    try:
        model, report = fit_method(args.method, cell, settings, args.seed, on_epoch=on_epoch)
    except DivergenceError as exc:
        if exc.last_good:
            checkpoint_save(exc.last_good, {"method": args.method, "status": "diverged"}, outdir / "last_good.ckpt")
        raise
    if args.method == "linear-em":
        rows = [(i, -ll, -ll) for i, ll in enumerate(report[1:])]
    elif args.method == "linear-sgd":
        rows = list(zip(range(len(report.train_loss)), report.train_loss, report.val_loss))
    with open(outdir / "loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("epoch", "train_loss", "val_loss"))
        for epoch, tr, va in rows:
            writer.writerow((epoch, repr(float(tr)), repr(float(va))))
    manifest = {"method": args.method, "seed": args.seed, "data": args.data, "val": args.val or "",
                "settings": json.dumps(settings.to_dict(), sort_keys=True), "argv": " ".join(sys.argv[1:])}
    if isinstance(model, LinearModel):
        params = model.state_dict()
    else:
        params = model.state_dict()
        manifest["config"] = model.config.to_json()
        if model.pixel_mean is not None:
            params["data.pixel_mean"] = model.pixel_mean
    checkpoint_save(params, manifest, outdir / "model.ckpt")
    _write_manifest(outdir / "manifest.txt", manifest)
    print(f"trained {args.method}; checkpoint in {outdir / 'model.ckpt'}")
    return EXIT_OK


def load_model(path):
    params, manifest = checkpoint_load(path)
    if manifest.get("method", "").startswith("linear"):
        return LinearModel.from_state_dict(params), manifest
    config = ModelConfig.from_dict(json.loads(manifest["config"]))
    model = SubspaceModel(config, T.SeededRng(0), pixel_mean=params.get("data.pixel_mean"))
    model.load_state_dict(params)
    return model, manifest


def _nominal_sparsity(data):
    """Requested sparsity of a random mask; the measured missing fraction otherwise."""
    try:
        spec = MaskSpec.parse(data.meta.get("mask", ""))
    except ValueError:
        spec = None
    if spec is not None and spec.kind == "random":
        return spec.sparsity
    return 1.0 - float(data.masks.mean())


def cmd_impute(args):
    model, manifest = load_model(args.checkpoint)
    data = dataset_load(args.data)
    expected = model.dims[0] if isinstance(model, LinearModel) else int(np.prod(model.config.image_shape))
    if int(np.prod(data.image_shape)) != expected:
        raise ShapeError(f"checkpoint expects {expected} pixels per image, dataset has {data.image_shape}")
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    rng = T.SeededRng(args.seed, 0x1A)
    started = time.perf_counter()
    point = impute_conditional_mean(model, data.images, data.masks, k=args.k, rng=rng, mean_mode=args.draws == 0)
    infer_ms = (time.perf_counter() - started) * 1e3 / max(len(data), 1)
    records = {"imputed": point}
    if args.draws > 0 and not isinstance(model, LinearModel):
        draws = impute_samples(model, data.images, data.masks, args.draws, args.pixel_noise, rng)
        records["samples"] = np.stack(draws, axis=1)
        grid_dir = outdir / "samples"
        grid_dir.mkdir(exist_ok=True)
        for i in range(len(data)):
            for j, draw in enumerate(draws):
                write_pgm(grid_dir / f"img{i:05d}-draw{j}.pgm", draw[i])
    (outdir / "imputed.ssd").write_bytes(encode_container(DATASET_MAGIC, records, {"checkpoint": args.checkpoint}))
    report = ExperimentReport("metrics")
    if data.ground_truth is not None and (data.masks < 1).any():
        report.add(data.meta.get("variant", "data"), _nominal_sparsity(data), manifest.get("method", "?"),
                   args.seed, per_image_mse(point, data.ground_truth, data.masks), infer_ms=infer_ms)
    (outdir / "metrics.csv").write_text(report.csv_text())
    write_pgm(outdir / "imputed.pgm", tile(point[:64], 8))
    print(f"imputed {len(data)} images into {outdir}")
    return EXIT_OK


def cmd_experiment(args):
    outdir = Path(args.out)
    sparsities = _floats(args.sparsities)
    directory = data_dir(args)
    if args.kind == "fc":
        dense = load_named(args.dataset, directory, args.seed, args.n)
        report = run_fc_projection_experiment(dense, sparsities, args.seed, d=args.latent_dim, name=args.dataset,
                                              ae_epochs=args.ae_epochs)
    elif args.kind == "compare":
        settings = _model_settings(args)
        methods = [m for m in args.methods.split(",") if m]
        bad = [m for m in methods if m not in METHODS]
        if bad:
            raise UsageError(f"unknown method(s) {', '.join(bad)}; valid: {', '.join(METHODS)}")
        cells = []
        for name in args.dataset.split(","):
            dense = load_named(name, directory, args.seed)
            for s in sparsities:
                cells.append(prepare_cell(dense, name, s, args.n_train, args.n_val, args.n_test, args.seed))
        report = run_comparison_experiment(cells, methods, args.seed, settings)
    else:
        settings = replace(_model_settings(args), grid_images=0)
        dense = load_named(args.dataset, directory, args.seed)
        models = {}
        for s in sparsities:
            if args.checkpoint:
                models[s], _ = load_model(args.checkpoint)
            else:
                cell = prepare_cell(dense, args.dataset, s, args.n_train, args.n_val, args.n_images, args.seed)
                models[s], _ = fit_method("conv-sparse", cell, settings, args.seed)
        test = prepare_cell(dense, args.dataset, sparsities[0], args.n_train, args.n_val, args.n_images, args.seed).test
        report = run_dip_experiment(test, sparsities, models, args.seed, n_images=args.n_images,
                                    iterations=args.iterations, name=args.dataset)
    report.config["argv"] = " ".join(sys.argv[1:])
    report.write(outdir)
    print(report.csv_text(), end="")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_model_flags(p):
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=4e-3)
    p.add_argument("--sigma2", type=float, default=0.1)
    p.add_argument("--channels", default="8,16", help="comma-separated widths, one per block")
    p.add_argument("--latent-channels", type=int, default=4)
    p.add_argument("--latent-dim", type=int, default=10)
    p.add_argument("--k", type=int, default=10, help="posterior draws averaged per imputation")


def build_parser():
    parser = argparse.ArgumentParser(prog="sparsesub",
                                     description="Imputation of sparse image collections with subspace models.")
    parser.add_argument("--config", help="JSON file of flag defaults; explicit flags take precedence")
    parser.add_argument("--data-dir", help="directory with the IDX sources (default $SSUB_DATA or ./data)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sparsify", help="simulate missing pixels and write a dataset container")
    p.add_argument("--in", dest="input", help="IDX image file (default: the variant's bundled source)")
    p.add_argument("--labels", help="IDX label file")
    p.add_argument("--variant", default="mnist-all", choices=("mnist-2", "mnist-all", "mnist-rot", "fashion"))
    p.add_argument("--mask", required=True, type=_mask_spec, help="random:<sparsity> or stride:<period>[:<phase>]")
    p.add_argument("--limit", type=int, help="keep only the first N images")
    p.add_argument("--split", default="all", choices=("all", "train", "val", "test"))
    p.add_argument("--fractions", default="0.5,0.3,0.2")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sparsify)

    p = sub.add_parser("train", help="fit one method and write checkpoint plus loss CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--method", required=True, choices=METHODS, metavar="METHOD",
                   help="one of: " + ", ".join(METHODS))
    p.add_argument("--out", required=True)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("impute", help="impute a dataset with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--draws", type=int, default=0, help="multiple imputations per image; 0 decodes the mean")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--pixel-noise", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("experiment", help="run a desk-scale experiment harness")
    p.add_argument("kind", choices=("fc", "compare", "dip"))
    p.add_argument("--dataset", default="mnist-all")
    p.add_argument("--sparsities", default="0.75,0.9")
    p.add_argument("--methods", default=",".join(METHODS))
    p.add_argument("--n", type=int, default=2000, help="images for the projection experiment")
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-val", type=int, default=500)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--n-images", type=int, default=25)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--ae-epochs", type=int, default=0)
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    _add_model_flags(p)
    p.set_defaults(func=cmd_experiment)

    for action in sub.choices.values():
        action.add_argument("--seed", type=int, help="required: all randomness derives from it")
    return parser


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            config = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read --config: {exc}")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(config) - known
        if unknown:
            parser.error(f"--config has unknown keys: {', '.join(sorted(unknown))}")
        sub.set_defaults(**config)
        args = parser.parse_args(argv)
    if args.seed is None:
        parser.error("--seed is required (no implicit seeding)")
    return args


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = os.environ.get("SSUB_THREADS")
    try:
        if threads:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(int(threads)):
                return args.func(args)
        return args.func(args)
    except UsageError as exc:
        print(f"sparsesub: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, NonFiniteError) as exc:
        print(f"sparsesub: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataFormatError, ShapeError, OSError, KeyError, ValueError) as exc:
        print(f"sparsesub: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
