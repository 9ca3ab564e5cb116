"""
A linear subspace model of sparse digits
========================================

Probabilistic PCA fitted by EM sees only the observed pixels of each image,
then fills the gaps with the closed-form conditional mean.  Run from the
repository root::

    python demos/02_linear_baseline.py
"""

from pathlib import Path

import numpy as np

from sparsesub import tensor as T
from sparsesub.data import load_idx, make_variant, tile, write_pgm
from sparsesub.experiments import prepare_cell
from sparsesub.impute import missing_pixel_mse
from sparsesub.linear import fit_em, impute_linear, pca_init

DATA, OUT = Path("data"), Path("demo-output")
OUT.mkdir(exist_ok=True)
mnist = load_idx(DATA / "mnist-train-images-idx3-ubyte.gz", DATA / "mnist-train-labels-idx1-ubyte.gz")
twos = make_variant(mnist, "mnist-2", T.SeededRng(0))

# 1000 training and 100 test images of the digit two, 75% of pixels missing.
cell = prepare_cell(twos, "mnist-2", 0.75, 1000, 0, 100, seed=0)
train = cell.train.images.reshape(1000, -1), cell.train.masks.reshape(1000, -1)

# Start from PCA of the mean-filled images; every EM step raises the
# observed-data log-likelihood.
model, trace = fit_em(pca_init(*train, d=10), *train, iters=30)
print("log-likelihood per image:", " -> ".join(f"{v / 1000:.1f}" for v in trace[::10]))
print(f"fitted noise variance {model.sigma2:.4f}")

test = cell.test
imputed = impute_linear(model, test.images.reshape(100, -1), test.masks.reshape(100, -1)).reshape(test.images.shape)
print(f"missing-pixel MSE {missing_pixel_mse(imputed, test.ground_truth, test.masks):.4f}")

# Rows: truth, what was observed, the linear completion.
write_pgm(OUT / "linear.pgm", tile(np.concatenate([test.ground_truth[:10], test.images[:10], imputed[:10]]), 10))
print(f"wrote {OUT / 'linear.pgm'}")
