"""
One model for all images versus one fit per image
=================================================

Deep Image Prior fits a fresh decoder to the observed pixels of a single
image.  A model trained once on the collection imputes the same image in a
single forward pass, and usually better.  Run from the repository root::

    python demos/04_deep_image_prior.py
"""

from pathlib import Path

from sparsesub import tensor as T
from sparsesub.data import load_idx, make_variant, write_pgm
from sparsesub.experiments import ComparisonSettings, fit_method, prepare_cell, run_dip_experiment

DATA, OUT = Path("data"), Path("demo-output")
OUT.mkdir(exist_ok=True)
mnist = load_idx(DATA / "mnist-train-images-idx3-ubyte.gz", DATA / "mnist-train-labels-idx1-ubyte.gz")
twos = make_variant(mnist, "mnist-2", T.SeededRng(0))
cell = prepare_cell(twos, "mnist-2", 0.9, 1000, 100, 5, seed=0)

model, _ = fit_method("conv-sparse", cell, ComparisonSettings(epochs=10), seed=0)

# Same five test images, same masks: the trained model against 1000 DIP steps each.
report = run_dip_experiment(cell.test, [0.9], model, seed=0, n_images=5, iterations=1000)
for row in report.tables["per_image"]:
    print(f"image {row['image']}: model {row['mse_model']:.4f} in {row['model_ms']:.0f} ms, "
          f"DIP {row['mse_dip']:.4f} in {row['dip_s']:.1f} s")

# Rows: truth, mask, model, DIP.
write_pgm(OUT / "dip.pgm", report.grids["0.9"])
print(f"wrote {OUT / 'dip.pgm'}")
