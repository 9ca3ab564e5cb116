"""Experiment harnesses: sparse projection, method comparison and the DIP contrast.

Every harness returns an :class:`ExperimentReport` whose rows follow the CSV
schema ``dataset,sparsity,method,seed,n_test,mse_mean,mse_std,train_s,infer_ms``.
The metric is the mean squared error per missing pixel (per latent entry for
the projection experiment), averaged over test images; ``mse_std`` is the
spread across images.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Dataset, permute_pixels, pixel_mean, sparsify, tile, write_pgm
from .dip import dip_fit, dip_synthesize
from .errors import DivergenceError, SparseSubError
from .impute import impute_conditional_mean, per_image_mse
from .layers import SparseSample, fill_interp, fill_mean, fill_zero, sparse_fc_forward
from .linear import fit_em, fit_sgd, pca_init
from .model import VARIANTS, ModelConfig, SubspaceModel, batches, train

log = logging.getLogger(__name__)

CSV_FIELDS = ("dataset", "sparsity", "method", "seed", "n_test", "mse_mean", "mse_std", "train_s", "infer_ms")
LINEAR_METHODS = ("linear-sgd", "linear-em")
METHODS = LINEAR_METHODS + VARIANTS
REFERENCE_METHODS = ("mean-fill",)
FILL_METHODS = ("zero", "mean", "interp", "sparse-fc")

_MODEL_STREAM = 31
_TRAIN_STREAM = 32
_IMPUTE_STREAM = 33
_DIP_STREAM = 34
_AE_STREAM = 35


def _fmt(value):
    if isinstance(value, float):
        return "nan" if math.isnan(value) else repr(value)
    return str(value)


@dataclass
class ExperimentReport:
    """Result rows plus auxiliary tables, configuration echo and image grids."""

    name: str
    rows: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    grids: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    def add(self, dataset, sparsity, method, seed, errors, train_s=0.0, infer_ms=0.0):
        errors = np.asarray(errors, np.float64)
        self.rows.append({
            "dataset": dataset, "sparsity": float(sparsity), "method": method, "seed": int(seed),
            "n_test": int(errors.size), "mse_mean": float(np.mean(errors)) if errors.size else math.nan,
            "mse_std": float(np.std(errors)) if errors.size else math.nan,
            "train_s": float(train_s), "infer_ms": float(infer_ms),
        })

    def lookup(self, **where):
        """Rows whose fields equal all given values."""
        return [r for r in self.rows if all(r[k] == v for k, v in where.items())]

    def mse(self, **where):
        rows = self.lookup(**where)
        if len(rows) != 1:
            raise KeyError(f"{len(rows)} rows match {where}")
        return rows[0]["mse_mean"]

    def csv_text(self, fields=CSV_FIELDS, rows=None):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(fields)
        for row in self.rows if rows is None else rows:
            writer.writerow([_fmt(row[f]) for f in fields])
        return buf.getvalue()

    def write(self, outdir):
        """Write ``<name>.csv``, one CSV per auxiliary table, ``manifest.txt`` and PGM grids."""
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / f"{self.name}.csv").write_text(self.csv_text())
        for table, rows in self.tables.items():
            if rows:
                (outdir / f"{self.name}-{table}.csv").write_text(self.csv_text(tuple(rows[0]), rows))
        manifest = {"metric": "mean squared error per missing pixel, averaged over test images",
                    **{k: v for k, v in self.config.items()}}
        (outdir / "manifest.txt").write_text("".join(f"{k}={manifest[k]}\n" for k in sorted(manifest)))
        for label, grid in self.grids.items():
            write_pgm(outdir / f"{self.name}-{label}.pgm", grid)
        return outdir


class TestAccessAudit:
    """Hands out each test set once per (cell, method); a second request is an error."""

    __test__ = False  # not a pytest class

    def __init__(self):
        self.counts = {}

    def __call__(self, dataset, *key):
        if self.counts.get(key):
            raise RuntimeError(f"test set for {key} was already evaluated")
        self.counts[key] = 1
        return dataset

    @property
    def total(self):
        return sum(self.counts.values())


# ---------------------------------------------------------------- projection experiment


def principal_subspace(images, d):
    """Orthonormal top-``d`` principal directions of full images and their mean."""
    flat = np.asarray(images, np.float64).reshape(len(images), -1)
    mean = flat.mean(axis=0)
    _, _, vt = np.linalg.svd(flat - mean, full_matrices=False)
    return vt[:d].T.astype(np.float32), mean.astype(np.float32)


def fill_projection(method, values, mask, weight, offset, pmean, ridge=1e-5):
    """Latent projection of sparse images ``(N, D)`` by one of :data:`FILL_METHODS`."""
    if method == "sparse-fc":
        with T.no_grad():
            return sparse_fc_forward(weight, offset, values, mask, ridge).data
    if method == "zero":
        filled = fill_zero(values, mask)
    elif method == "mean":
        filled = fill_mean(values, mask, pmean)
    elif method == "interp":
        filled = fill_interp(values, mask)
    else:
        raise ValueError(f"unknown fill method {method!r}")
    return (filled.reshape(len(filled), -1) - offset) @ weight


def _projection_errors(dataset, weight, offset, ridge, truth=None):
    n = len(dataset)
    if truth is None:
        truth = (dataset.ground_truth.reshape(n, -1) - offset) @ weight
    pmean = pixel_mean(dataset).reshape(-1)
    out = {}
    for method in FILL_METHODS:
        if method == "interp":
            values, mask = dataset.images, dataset.masks
        else:
            values, mask = dataset.images.reshape(n, -1), dataset.masks.reshape(n, -1)
        proj = fill_projection(method, values, mask, weight, offset, pmean, ridge)
        out[method] = (np.mean((proj - truth) ** 2, axis=1), proj)
    return out, truth


def _linear_autoencoder(method, train_set, val_set, d, epochs, lr, batch_size, seed, ridge):
    """One-layer encoder/decoder trained on the masked objective; returns (val curve, full recon error)."""
    rng = T.SeededRng(seed, _AE_STREAM)
    D = int(np.prod(train_set.image_shape))
    pmean = pixel_mean(train_set)
    w_init, m_init = principal_subspace(fill_mean(train_set.images, train_set.masks, pmean), d)
    enc = T.Parameter(w_init, "ae.enc")
    enc_b = T.Parameter(m_init, "ae.enc_offset")
    dec = T.Parameter(w_init.T.copy(), "ae.dec")
    dec_b = T.Parameter(m_init.copy(), "ae.dec_bias")
    opt = T.Adam([enc, enc_b, dec, dec_b], lr=lr)

    def forward(ds, idx):
        values = ds.images[idx].reshape(len(idx), D)
        mask = ds.masks[idx].reshape(len(idx), D)
        if method == "sparse-fc":
            code = sparse_fc_forward(enc, enc_b, values, mask, ridge)
        else:
            if method == "zero":
                filled = fill_zero(values, mask)
            elif method == "mean":
                filled = fill_mean(values, mask, pmean.reshape(-1))
            else:
                filled = fill_interp(ds.images[idx], ds.masks[idx]).reshape(len(idx), D)
            code = T.matmul(T.sub(filled, enc_b), enc)
        return T.add(T.matmul(code, dec), dec_b), values, mask

    def masked_loss(ds, idx):
        recon, values, mask = forward(ds, idx)
        return T.reduce_sum(T.square(T.mul(T.sub(recon, values), mask))), float(mask.sum())

    curve = []
    for _ in range(epochs):
        for idx in batches(len(train_set), batch_size, rng.permutation(len(train_set))):
            opt.zero_grad()
            loss, count = masked_loss(train_set, idx)
            T.backward(T.mul(loss, 1.0 / max(count, 1.0)))
            opt.step()
        with T.no_grad():
            total = count = 0.0
            for idx in batches(len(val_set), 256):
                loss, c = masked_loss(val_set, idx)
                total, count = total + float(loss.data), count + c
        curve.append(total / max(count, 1.0))
    with T.no_grad():
        idx = np.arange(len(val_set))
        recon, _, _ = forward(val_set, idx)
    full = np.mean((recon.data - val_set.ground_truth.reshape(len(val_set), D)) ** 2, axis=1)
    return curve, full


def run_fc_projection_experiment(dataset, sparsities, seed, d=10, name="fashion", permute_seed=None,
                                 ae_epochs=0, ae_lr=1e-3, ae_batch=64, ridge=1e-5):
    """Error of sparse latent projections against the full-image projection.

    ``dataset`` holds fully observed images.  The subspace is the top-``d``
    principal directions of those images.  Each sparsity is evaluated on the
    original pixel order and, with one fixed permutation, on permuted pixels
    (methods suffixed ``-perm``).  With ``ae_epochs > 0`` a one-layer linear
    autoencoder is also trained per fill method (methods prefixed ``ae-``);
    its per-epoch masked validation loss goes to the ``ae_curves`` table.
    """
    dense = Dataset.dense(dataset.ground_truth if dataset.ground_truth is not None else dataset.images)
    weight, offset = principal_subspace(dense.ground_truth, d)
    _, perm = permute_pixels(dense, seed if permute_seed is None else permute_seed)
    report = ExperimentReport("fc-projection", config={
        "dataset": name, "seed": seed, "d": d, "ridge": ridge, "n": len(dense),
        "sparsities": ",".join(f"{s:g}" for s in sparsities), "ae_epochs": ae_epochs})
    report.tables["permutation_check"] = []
    report.tables["ae_curves"] = []
    for sparsity in sparsities:
        sparse = sparsify(dense, f"random:{sparsity}", seed)
        sparse_perm, _ = permute_pixels(sparse, seed if permute_seed is None else permute_seed)
        started = time.perf_counter()
        original, truth = _projection_errors(sparse, weight, offset, ridge)
        elapsed = (time.perf_counter() - started) * 1e3 / len(dense)
        # the latent target does not depend on pixel order; reuse it so errors compare bit for bit
        shuffled, _ = _projection_errors(sparse_perm, weight[perm], offset[perm], ridge, truth)
        for method in FILL_METHODS:
            report.add(name, sparsity, method, seed, original[method][0], infer_ms=elapsed)
            report.add(name, sparsity, f"{method}-perm", seed, shuffled[method][0], infer_ms=elapsed)
        identical = bool(np.array_equal(original["sparse-fc"][1], shuffled["sparse-fc"][1]))
        report.tables["permutation_check"].append(
            {"dataset": name, "sparsity": float(sparsity), "seed": int(seed), "sparse_fc_bit_identical": int(identical)})
        if ae_epochs > 0 and sparsity > 0:
            n_train = len(sparse) * 4 // 5
            train_set, val_set = sparse.subset(slice(0, n_train)), sparse.subset(slice(n_train, None))
            for method in FILL_METHODS:
                started = time.perf_counter()
                curve, full = _linear_autoencoder(method, train_set, val_set, d, ae_epochs, ae_lr, ae_batch, seed, ridge)
                report.add(name, sparsity, f"ae-{method}", seed, full, train_s=time.perf_counter() - started)
                report.tables["ae_curves"].extend(
                    {"dataset": name, "sparsity": float(sparsity), "method": method, "epoch": e, "val_loss": float(v)}
                    for e, v in enumerate(curve))
    return report


# ---------------------------------------------------------------- comparison experiment


@dataclass
class ComparisonSettings:
    """Training and evaluation knobs shared by all methods of a comparison."""

    epochs: int = 20
    batch_size: int = 32
    lr: float = 4e-3
    sigma2: float = 0.1
    channels: tuple = (8, 16)
    latent_channels: int = 4
    latent_dim: int = 10
    linear_d: int = 10
    linear_sigma2: float = 0.1
    linear_epochs: int = 20
    em_iters: int = 30
    k_impute: int = 10
    grid_images: int = 8

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


@dataclass
class Cell:
    """One (dataset, sparsity) arm: sparsified train, validation and test sets."""

    dataset: str
    sparsity: float
    train: Dataset
    val: Dataset
    test: Dataset


def prepare_cell(source, dataset, sparsity, n_train, n_val, n_test, seed, mask=None):
    """Seeded disjoint train/val/test draws from a dense source, each sparsified independently."""
    n = n_train + n_val + n_test
    if n > len(source):
        raise ValueError(f"need {n} images, source has {len(source)}")
    order = T.SeededRng(seed, 0xCE11).permutation(len(source))[:n]
    spec = mask or f"random:{sparsity}"
    parts = []
    for k, (lo, hi) in enumerate(((0, n_train), (n_train, n_train + n_val), (n_train + n_val, n))):
        part = source.subset(order[lo:hi], split=("train", "val", "test")[k])
        parts.append(sparsify(part, spec, seed * 3 + k))
    return Cell(dataset, float(sparsity), *parts)


def fit_method(method, cell, settings, seed, on_epoch=None):
    """Train one method on a cell; returns the fitted model and its training report."""
    tr, va = cell.train, cell.val
    if method in LINEAR_METHODS:
        flat = (lambda ds: (ds.images.reshape(len(ds), -1), ds.masks.reshape(len(ds), -1)))
        values, mask = flat(tr)
        init = pca_init(values, mask, settings.linear_d, settings.linear_sigma2)
        if method == "linear-em":
            model, trace = fit_em(init, values, mask, settings.em_iters)
            return model, trace
        vv, vm = flat(va)
        return fit_sgd(init, values, mask, settings.linear_epochs, settings.lr, T.SeededRng(seed, _TRAIN_STREAM),
                       batch_size=settings.batch_size, val_values=vv, val_mask=vm)
    config = ModelConfig(variant=method, image_shape=tr.image_shape, latent_dim=settings.latent_dim,
                         latent_channels=settings.latent_channels, n_blocks=len(settings.channels),
                         channels=tuple(settings.channels), sigma2=settings.sigma2)
    model = SubspaceModel(config, T.SeededRng(seed, _MODEL_STREAM), pixel_mean=pixel_mean(tr))
    report = train(model, tr.images, tr.masks, settings.epochs, settings.batch_size, settings.lr,
                   T.SeededRng(seed, _TRAIN_STREAM), va.images, va.masks, on_epoch=on_epoch)
    return model, report


def _grid(cell, imputations, n):
    """Rows: truth, interpolation, mask, then one row per method."""
    test = cell.test
    n = min(n, len(test))
    rows = [test.ground_truth[:n], fill_interp(test.images[:n], test.masks[:n]), test.masks[:n]]
    rows += [imputations[m][:n] for m in imputations]
    return tile(np.concatenate(rows), n)


def run_comparison_experiment(cells, methods, seed, settings=None, audit=None):
    """Train every method on every cell and tabulate test missing-pixel MSE.

    A ``mean-fill`` reference row (per-pixel training mean) is always added.
    A method that diverges yields a row with NaN error and an entry in
    ``report.failures``.
    """
    settings = settings or ComparisonSettings()
    audit = audit or TestAccessAudit()
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ValueError(f"unknown methods {unknown}; valid: {', '.join(METHODS)}")
    report = ExperimentReport("compare", config={"seed": seed, "methods": ",".join(methods),
                                                 **{f"settings.{k}": v for k, v in settings.to_dict().items()}})
    report.tables["curves"] = []
    for cell in cells:
        imputations = {}
        test = audit(cell.test, cell.dataset, cell.sparsity, "mean-fill")
        reference = np.broadcast_to(pixel_mean(cell.train), test.images.shape)
        report.add(cell.dataset, cell.sparsity, "mean-fill", seed, per_image_mse(reference, test.ground_truth, test.masks))
        for method in methods:
            started = time.perf_counter()
            try:
                model, fit_report = fit_method(method, cell, settings, seed)
            except (DivergenceError, SparseSubError) as exc:
                log.warning("%s on %s@%g failed: %s", method, cell.dataset, cell.sparsity, exc)
                report.failures.append({"dataset": cell.dataset, "sparsity": cell.sparsity, "method": method,
                                        "error": str(exc)})
                report.add(cell.dataset, cell.sparsity, method, seed, [math.nan])
                continue
            train_s = time.perf_counter() - started
            curve = fit_report if isinstance(fit_report, list) else fit_report.val_loss
            report.tables["curves"].extend(
                {"dataset": cell.dataset, "sparsity": cell.sparsity, "method": method, "epoch": e, "value": float(v)}
                for e, v in enumerate(curve))
            test = audit(cell.test, cell.dataset, cell.sparsity, method)
            started = time.perf_counter()
            imputed = impute_conditional_mean(model, test.images, test.masks, k=settings.k_impute,
                                              rng=T.SeededRng(seed, _IMPUTE_STREAM))
            infer_ms = (time.perf_counter() - started) * 1e3 / len(test)
            imputations[method] = imputed
            report.add(cell.dataset, cell.sparsity, method, seed, per_image_mse(imputed, test.ground_truth, test.masks),
                       train_s, infer_ms)
        if imputations and settings.grid_images:
            report.grids[f"{cell.dataset}-{cell.sparsity:g}"] = _grid(cell, imputations, settings.grid_images)
    return report


# ---------------------------------------------------------------- DIP experiment


def run_dip_experiment(dataset, sparsities, model, seed, n_images=25, iterations=1000, lr=1e-3, name="mnist-2",
                       k_impute=10):
    """Per-image DIP fits against a trained model on the same sparse test images.

    ``dataset`` holds dense test images; ``model`` is a trained model or a
    ``{sparsity: model}`` mapping.  Rows are ``model`` and ``dip`` per
    sparsity; the ``per_image`` table has both errors and wall times.
    """
    dense = Dataset.dense(dataset.ground_truth if dataset.ground_truth is not None else dataset.images)
    dense = dense.subset(slice(0, n_images))
    report = ExperimentReport("dip", config={"dataset": name, "seed": seed, "n_images": len(dense),
                                             "iterations": iterations, "dip_lr": lr, "k_impute": k_impute})
    report.tables["per_image"] = []
    for sparsity in sparsities:
        trained = model[sparsity] if isinstance(model, dict) else model
        sparse = sparsify(dense, f"random:{sparsity}", seed)
        rng = T.SeededRng(seed, _IMPUTE_STREAM)
        model_ms, model_img = [], []
        for i in range(len(sparse)):
            started = time.perf_counter()
            img = impute_conditional_mean(trained, sparse.images[i:i + 1], sparse.masks[i:i + 1], k=k_impute, rng=rng)
            model_ms.append((time.perf_counter() - started) * 1e3)
            model_img.append(img[0])
        dip_s, dip_img = [], []
        for i in range(len(sparse)):
            run = dip_fit(SparseSample(sparse.images[i], sparse.masks[i]), trained.config,
                          T.SeededRng(seed, _DIP_STREAM, i), iterations=iterations, lr=lr)
            dip_s.append(run.seconds)
            dip_img.append(dip_synthesize(run))
        model_err = per_image_mse(np.stack(model_img), sparse.ground_truth, sparse.masks)
        dip_err = per_image_mse(np.stack(dip_img), sparse.ground_truth, sparse.masks)
        report.add(name, sparsity, "model", seed, model_err, infer_ms=float(np.mean(model_ms)))
        report.add(name, sparsity, "dip", seed, dip_err, train_s=float(np.mean(dip_s)),
                   infer_ms=float(np.mean(dip_s)) * 1e3)
        report.tables["per_image"].extend(
            {"sparsity": float(sparsity), "image": i, "mse_model": float(model_err[i]), "mse_dip": float(dip_err[i]),
             "model_ms": float(model_ms[i]), "dip_s": float(dip_s[i])} for i in range(len(sparse)))
        report.grids[f"{sparsity:g}"] = tile(np.concatenate([sparse.ground_truth, sparse.masks,
                                                             np.stack(model_img), np.stack(dip_img)]), len(sparse))
    return report
