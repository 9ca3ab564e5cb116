import math

import numpy as np
import pytest

from sparsesub import experiments as E
from sparsesub import tensor as T
from sparsesub.data import Dataset
from sparsesub.errors import DivergenceError
from sparsesub.experiments import (
    CSV_FIELDS,
    ComparisonSettings,
    ExperimentReport,
    TestAccessAudit,
    prepare_cell,
    principal_subspace,
    run_comparison_experiment,
    run_dip_experiment,
    run_fc_projection_experiment,
)
from sparsesub.model import ModelConfig, SubspaceModel

TINY = ComparisonSettings(epochs=1, batch_size=8, channels=(2, 2), latent_channels=1, latent_dim=3, linear_d=3,
                          linear_epochs=1, em_iters=2, k_impute=2, grid_images=2)


@pytest.fixture
def blobs(rng):
    """Smooth 12x12 images: sums of two random Gaussian bumps."""
    yy, xx = np.mgrid[0:12, 0:12]
    imgs = []
    for _ in range(60):
        img = np.zeros((12, 12))
        for _ in range(2):
            cy, cx = rng.uniform(2, 10, 2)
            img += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 8)
        imgs.append(img / img.max())
    return Dataset.dense(np.array(imgs))


# ---------------------------------------------------------------- report


def test_report_csv_schema_and_repr_floats():
    report = ExperimentReport("x")
    report.add("d", 0.9, "m", 3, [0.1, 0.3], train_s=1.5, infer_ms=2.0)
    lines = report.csv_text().splitlines()
    assert lines[0] == ",".join(CSV_FIELDS)
    assert lines[1] == "d,0.9,m,3,2,0.2,0.09999999999999999,1.5,2.0"
    assert report.mse(method="m") == pytest.approx(0.2)


def test_report_write(tmp_path):
    report = ExperimentReport("x", config={"seed": 1})
    report.add("d", 0.5, "m", 1, [1.0])
    report.tables["extra"] = [{"a": 1, "b": 2.5}]
    report.grids["g"] = np.zeros((3, 3))
    report.write(tmp_path)
    assert (tmp_path / "x.csv").exists() and (tmp_path / "x-g.pgm").exists()
    assert (tmp_path / "x-extra.csv").read_text() == "a,b\n1,2.5\n"
    assert "seed=1" in (tmp_path / "manifest.txt").read_text()


def test_audit_rejects_second_access():
    audit = TestAccessAudit()
    audit("test", "cell", "m")
    with pytest.raises(RuntimeError):
        audit("test", "cell", "m")
    audit("test", "cell", "other")
    assert audit.total == 2


# ---------------------------------------------------------------- projection


def test_principal_subspace_orthonormal(blobs):
    w, _ = principal_subspace(blobs.ground_truth, 5)
    assert np.allclose(w.T @ w, np.eye(5), atol=1e-5)


def test_projection_zero_sparsity_is_exact(blobs):
    report = run_fc_projection_experiment(blobs, [0.0], seed=0, d=5)
    for row in report.rows:
        assert row["mse_mean"] < 1e-5, row


def test_projection_permutation_bit_identical(blobs):
    report = run_fc_projection_experiment(blobs, [0.5, 0.9], seed=1, d=5)
    assert all(r["sparse_fc_bit_identical"] == 1 for r in report.tables["permutation_check"])
    for s in (0.5, 0.9):
        assert report.mse(sparsity=s, method="sparse-fc") == report.mse(sparsity=s, method="sparse-fc-perm")


def test_projection_rows_and_ordering(blobs):
    report = run_fc_projection_experiment(blobs, [0.75], seed=0, d=5)
    methods = {r["method"] for r in report.rows}
    assert methods == {m + s for m in E.FILL_METHODS for s in ("", "-perm")}
    assert report.mse(method="sparse-fc") < report.mse(method="zero")


def test_projection_autoencoder_arm(blobs):
    report = run_fc_projection_experiment(blobs, [0.75], seed=0, d=3, ae_epochs=2)
    assert {f"ae-{m}" for m in E.FILL_METHODS} <= {r["method"] for r in report.rows}
    assert len(report.tables["ae_curves"]) == 2 * len(E.FILL_METHODS)


def test_projection_deterministic(blobs):
    a = run_fc_projection_experiment(blobs, [0.9], seed=4, d=4).csv_text()
    b = run_fc_projection_experiment(blobs, [0.9], seed=4, d=4).csv_text()
    strip = (lambda t: [line.rsplit(",", 2)[0] for line in t.splitlines()])  # drop timing columns
    assert strip(a) == strip(b)


# ---------------------------------------------------------------- comparison


def test_prepare_cell_disjoint(blobs):
    cell = prepare_cell(blobs, "blobs", 0.75, 30, 10, 20, seed=2)
    assert (len(cell.train), len(cell.val), len(cell.test)) == (30, 10, 20)
    keys = [tuple(im.ravel()[:5]) for part in (cell.train, cell.val, cell.test) for im in part.ground_truth]
    assert len(set(keys)) == 60
    assert (cell.test.masks.sum(axis=(1, 2)) == 36).all()


def test_prepare_cell_too_large(blobs):
    with pytest.raises(ValueError):
        prepare_cell(blobs, "blobs", 0.5, 50, 10, 10, seed=0)


def test_comparison_one_row_per_cell_and_method(blobs):
    cells = [prepare_cell(blobs, "blobs", s, 30, 10, 20, seed=0) for s in (0.75, 0.9)]
    methods = ["linear-sgd", "linear-em", "conv-zero", "conv-fc-sparse"]
    report = run_comparison_experiment(cells, methods, seed=0, settings=TINY)
    keys = [(r["sparsity"], r["method"]) for r in report.rows]
    assert sorted(keys) == sorted((s, m) for s in (0.75, 0.9) for m in methods + ["mean-fill"])
    assert all(r["n_test"] == 20 and np.isfinite(r["mse_mean"]) for r in report.rows)
    assert set(report.grids) == {"blobs-0.75", "blobs-0.9"}


def test_comparison_reproducible(blobs):
    cell = prepare_cell(blobs, "blobs", 0.75, 30, 10, 20, seed=0)
    fields = ("dataset", "sparsity", "method", "seed", "n_test", "mse_mean", "mse_std")
    a = run_comparison_experiment([cell], ["conv-sparse", "linear-sgd"], 0, TINY)
    b = run_comparison_experiment([cell], ["conv-sparse", "linear-sgd"], 0, TINY)
    assert a.csv_text(fields) == b.csv_text(fields)


def test_comparison_failed_cell_reported(blobs, monkeypatch):
    cell = prepare_cell(blobs, "blobs", 0.75, 30, 10, 20, seed=0)
    real = E.fit_method

    def flaky(method, *args, **kw):
        if method == "conv-zero":
            raise DivergenceError("boom")
        return real(method, *args, **kw)

    monkeypatch.setattr(E, "fit_method", flaky)
    report = run_comparison_experiment([cell], ["conv-zero", "linear-em"], 0, TINY)
    assert math.isnan(report.mse(method="conv-zero"))
    assert np.isfinite(report.mse(method="linear-em"))
    assert report.failures[0]["method"] == "conv-zero"


def test_comparison_test_set_accessed_once_per_method(blobs):
    cell = prepare_cell(blobs, "blobs", 0.75, 30, 10, 20, seed=0)
    audit = TestAccessAudit()
    run_comparison_experiment([cell], ["linear-em", "conv-mean"], 0, TINY, audit=audit)
    assert audit.total == 3 and max(audit.counts.values()) == 1


def test_comparison_rejects_unknown_method(blobs):
    cell = prepare_cell(blobs, "blobs", 0.75, 30, 10, 20, seed=0)
    with pytest.raises(ValueError):
        run_comparison_experiment([cell], ["conv-nope"], 0, TINY)


# ---------------------------------------------------------------- DIP


def test_dip_report_columns(blobs):
    cfg = ModelConfig(variant="conv-sparse", image_shape=(12, 12), latent_channels=1, n_blocks=2, channels=(2, 2))
    model = SubspaceModel(cfg, T.SeededRng(0))
    report = run_dip_experiment(blobs, [0.75], model, seed=0, n_images=3, iterations=4)
    assert {r["method"] for r in report.rows} == {"model", "dip"}
    dip = report.lookup(method="dip")[0]
    assert dip["train_s"] > 0 and dip["infer_ms"] > 0 and report.lookup(method="model")[0]["infer_ms"] > 0
    assert set(report.tables["per_image"][0]) == {"sparsity", "image", "mse_model", "mse_dip", "model_ms", "dip_s"}
    assert len(report.tables["per_image"]) == 3
