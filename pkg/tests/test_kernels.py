import numpy as np
import pytest

from mfdetr import kernels

from oracles import bilinear_oracle


def _problem(seed, G=3, H=5, W=7, C=4, P=40):
    rng = np.random.default_rng(seed)
    value = rng.normal(size=(G, H, W, C))
    pts = rng.uniform(-1.5, max(H, W) + 1.5, size=(G, P, 2))
    gout = rng.normal(size=(G, P, C))
    return value, pts, gout


@pytest.mark.parametrize("backend", kernels.available_backends())
def test_gather_matches_oracle(backend):
    value, pts, _ = _problem(0)
    with kernels.use_backend(backend):
        out = kernels.gather(value, pts)
    for g in range(value.shape[0]):
        expect = bilinear_oracle(value[g].transpose(2, 0, 1), pts[g])
        assert np.abs(out[g] - expect).max() <= 1e-12


@pytest.mark.parametrize("backend", kernels.available_backends())
def test_scatter_is_adjoint_of_gather(backend):
    value, pts, gout = _problem(1)
    with kernels.use_backend(backend):
        gval, _ = kernels.scatter(value, pts, gout, False)
        lhs = np.sum(kernels.gather(value, pts) * gout)
    assert abs(lhs - np.sum(gval * value)) <= 1e-10


@pytest.mark.skipif(len(kernels.available_backends()) < 2, reason="compiled kernels not built")
@pytest.mark.parametrize("seed", range(5))
def test_backends_agree(seed):
    value, pts, gout = _problem(seed, G=4, H=9, W=6, C=3, P=100)
    outs = {}
    for name in kernels.available_backends():
        with kernels.use_backend(name):
            outs[name] = (kernels.gather(value, pts), *kernels.scatter(value, pts, gout, True))
    a, b = outs.values()
    for u, v in zip(a, b):
        assert np.abs(u - v).max() <= 1e-12


def test_use_backend_restores_previous():
    before = kernels.BACKEND
    with kernels.use_backend("numpy"):
        assert kernels.BACKEND == "numpy"
    assert kernels.BACKEND == before


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.use_backend("fortran")
