"""
Training a sparse convolutional subspace model
==============================================

The encoder's convolutions renormalize by the observed taps and carry a mask
forward, so training never looks at a missing pixel.  The trained model
imputes by averaging decoded posterior draws.  Run from the repository root
(about two minutes on one core)::

    python demos/03_train_and_impute.py
"""

from pathlib import Path

import numpy as np

from sparsesub import tensor as T
from sparsesub.data import load_idx, make_variant, pixel_mean, tile, write_pgm
from sparsesub.experiments import prepare_cell
from sparsesub.impute import impute_conditional_mean, impute_samples, missing_pixel_mse
from sparsesub.model import ModelConfig, SubspaceModel, train

DATA, OUT = Path("data"), Path("demo-output")
OUT.mkdir(exist_ok=True)
mnist = load_idx(DATA / "mnist-train-images-idx3-ubyte.gz", DATA / "mnist-train-labels-idx1-ubyte.gz")
twos = make_variant(mnist, "mnist-2", T.SeededRng(0))
cell = prepare_cell(twos, "mnist-2", 0.75, 1000, 100, 100, seed=0)

config = ModelConfig(variant="conv-sparse", channels=(8, 16), latent_channels=4, sigma2=0.1)
model = SubspaceModel(config, T.SeededRng(0), pixel_mean=pixel_mean(cell.train))


def show(epoch, train_loss, val_loss):
    print(f"epoch {epoch:2d}  train {train_loss:8.2f}  val {val_loss:8.2f}")


# Adam over shuffled batches; the epoch with the best validation loss is kept.
report = train(model, cell.train.images, cell.train.masks, epochs=10, batch_size=32, lr=4e-3,
               rng=T.SeededRng(0, 1), val_values=cell.val.images, val_mask=cell.val.masks, on_epoch=show)
print(f"best epoch {report.best_epoch}")

test = cell.test
mean = impute_conditional_mean(model, test.images, test.masks, k=10, rng=T.SeededRng(0, 2))
print(f"missing-pixel MSE {missing_pixel_mse(mean, test.ground_truth, test.masks):.4f}")

# Multiple imputation: separate posterior draws show where the model is unsure.
draws = impute_samples(model, test.images[:8], test.masks[:8], n_draws=3, include_pixel_noise=False,
                       rng=T.SeededRng(0, 3))
rows = [test.ground_truth[:8], test.images[:8], mean[:8], *draws]
write_pgm(OUT / "conv-sparse.pgm", tile(np.concatenate(rows), 8))
print(f"wrote {OUT / 'conv-sparse.pgm'}")
