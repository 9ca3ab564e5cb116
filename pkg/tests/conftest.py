import os
from pathlib import Path

import numpy as np
import pytest

from sparsesub import tensor as T

DATA_DIR = Path(os.environ.get("SSUB_DATA", Path(__file__).resolve().parents[1] / "data"))


def numeric_grad(f, x, h=1e-3):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place, float64 accumulation)."""
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = float(f())
        flat[i] = old - h
        down = float(f())
        flat[i] = old
        grad.reshape(-1)[i] = (up - down) / (2 * h)
    return grad


def rel_err(analytic, numeric):
    analytic = np.asarray(analytic, np.float64)
    numeric = np.asarray(numeric, np.float64)
    scale = max(np.linalg.norm(numeric), np.linalg.norm(analytic), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def symmetrize(g):
    return 0.5 * (g + np.swapaxes(g, -1, -2))


def gradcheck(build, params, h=1e-6, seed=0, symmetric=()):
    """Largest relative error over ``params`` for the loss ``sum(probe * build())``.

    A fixed random probe makes the scalar loss a generic linear functional of
    the output, which exercises every output entry's adjoint.  Everything runs
    in float64 so the central differences measure the adjoint rather than
    rounding noise.  Parameters in ``symmetric`` are SPD matrices whose adjoint
    is defined on symmetric perturbations, so their numeric gradient is
    symmetrized.
    """
    saved = [p.data for p in params]
    try:
        with T.precision(np.float64):
            for p in params:
                p.data = p.data.astype(np.float64)
            out = build()
            probe = np.random.default_rng(seed).standard_normal(out.shape)

            def loss():
                with T.no_grad():
                    return float(np.sum(probe * build().data))

            for p in params:
                p.zero_grad()
            T.backward(T.reduce_sum(T.mul(build(), probe)))
            analytic = [p.grad.copy() for p in params]
            errors = []
            for a, p in zip(analytic, params):
                num = numeric_grad(loss, p.data, h)
                errors.append(rel_err(a, symmetrize(num) if any(p is q for q in symmetric) else num))
    finally:
        for p, data in zip(params, saved):
            p.data = data
            p.zero_grad()
    return max(errors)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def sparse_batch(rng):
    """Four 12x12 images at 60% sparsity with a fixed mask draw."""
    images = rng.random((4, 12, 12)).astype(np.float32)
    masks = (rng.random((4, 12, 12)) < 0.4).astype(np.float32)
    return images * masks, masks, images


def mnist_path(kind="train"):
    return DATA_DIR / f"mnist-{kind}-images-idx3-ubyte.gz", DATA_DIR / f"mnist-{kind}-labels-idx1-ubyte.gz"


@pytest.fixture(scope="session")
def mnist_small():
    from sparsesub.data import load_idx

    images, labels = mnist_path()
    if not images.exists():
        pytest.skip("bundled MNIST subset not found")
    return load_idx(images, labels).subset(slice(0, 600))


# ---------------------------------------------------------------- acceptance summary

_ACCEPTANCE = {}


@pytest.fixture
def notes(request):
    """Measured quantities quoted in the running criterion's summary line."""
    request.node.acceptance_notes = []
    return request.node.acceptance_notes


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    status = "PASS" if report.passed else "SKIP" if report.skipped else "FAIL"
    if _ACCEPTANCE.get(number, ("PASS",))[0] == "PASS":
        detail = "; ".join(getattr(item, "acceptance_notes", []))
        if report.skipped:
            detail = str(report.longrepr[-1]) if isinstance(report.longrepr, tuple) else detail
        _ACCEPTANCE[number] = (status, title, detail, call.duration)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, title, detail, seconds = _ACCEPTANCE[number]
        terminalreporter.write_line(f"{status} criterion {number}: {title} [{seconds:.1f}s] {detail}")
