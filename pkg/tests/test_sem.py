import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sigmanet.autodiff import ShapeError, Tensor
from sigmanet.sem import SEM, SemConfig, sem_fuse


def T(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def params(rng, d=6, d1=4, ns=5):
    return dict(w_spat=rng.standard_normal((d, d1)), w_spec=rng.standard_normal((d, d1)),
                b_spec=rng.standard_normal(d1), w_align=rng.standard_normal((ns, d1)), b_align=rng.standard_normal(d1))


def fuse(f_spat, f_spec, p):
    return sem_fuse(T(f_spat), T(f_spec), T(p["w_spat"]), T(p["w_spec"]), T(p["b_spec"]),
                    T(p["w_align"]), T(p["b_align"])).data


def direct(f_spat, f_spec, p):
    """Loop-level evaluation of the recalibration for one sample."""
    spat = np.einsum("hwd,de->hwe", f_spat, p["w_spat"])
    v = np.array([np.mean(tok @ p["w_spec"] + p["b_spec"]) for tok in f_spec])
    gain = v @ p["w_align"] + p["b_align"]
    out = np.empty_like(spat)
    for c in range(spat.shape[-1]):
        out[..., c] = spat[..., c] * (1.0 + gain[c])
    return out


def test_matches_direct_evaluation():
    rng = np.random.default_rng(0)
    p = params(rng)
    f_spat, f_spec = rng.standard_normal((3, 4, 6)), rng.standard_normal((5, 6))
    np.testing.assert_allclose(fuse(f_spat, f_spec, p), direct(f_spat, f_spec, p), rtol=0, atol=1e-12)


def test_zero_alignment_is_identity_on_compressed_spatial():
    rng = np.random.default_rng(1)
    p = params(rng)
    p["w_align"][:] = 0
    p["b_align"][:] = 0
    f_spat = rng.standard_normal((3, 4, 6))
    ref = f_spat @ p["w_spat"]
    for _ in range(20):
        out = fuse(f_spat, rng.standard_normal((5, 6)) * 10, p)
        assert np.array_equal(out, ref)


def test_unit_gain_doubles():
    rng = np.random.default_rng(2)
    p = params(rng)
    p["w_align"][:] = 0
    p["b_align"][:] = 1.0
    f_spat = rng.standard_normal((2, 2, 6))
    np.testing.assert_allclose(fuse(f_spat, rng.standard_normal((5, 6)), p), 2 * f_spat @ p["w_spat"], atol=1e-12)


@settings(max_examples=25)
@given(st.floats(-5, 5), st.integers(0, 10_000))
def test_linear_in_spatial_features(scale, seed):
    rng = np.random.default_rng(seed)
    p = params(rng)
    f_spat, f_spec = rng.standard_normal((2, 3, 6)), rng.standard_normal((5, 6))
    np.testing.assert_allclose(fuse(scale * f_spat, f_spec, p), scale * fuse(f_spat, f_spec, p), atol=1e-9)


def test_batched_matches_per_sample():
    rng = np.random.default_rng(3)
    p = params(rng)
    f_spat, f_spec = rng.standard_normal((2, 3, 4, 6)), rng.standard_normal((2, 5, 6))
    out = fuse(f_spat, f_spec, p)
    for b in range(2):
        np.testing.assert_allclose(out[b], direct(f_spat[b], f_spec[b], p), atol=1e-12)


def test_shape_errors():
    rng = np.random.default_rng(4)
    p = params(rng)
    with pytest.raises(ShapeError):
        fuse(rng.standard_normal((2, 2, 5)), rng.standard_normal((5, 6)), p)
    with pytest.raises(ShapeError):
        fuse(rng.standard_normal((2, 2, 6)), rng.standard_normal((4, 6)), p)
    with pytest.raises(ShapeError):
        fuse(rng.standard_normal((2, 2, 2, 6)), rng.standard_normal((3, 5, 6)), p)


def test_module_shapes_and_config():
    sem = SEM(SemConfig(dim=8, reduced_dim=4, n_spec=5), np.random.default_rng(0))
    out = sem(Tensor(np.ones((1, 2, 2, 8))), Tensor(np.ones((1, 5, 8))))
    assert out.shape == (1, 2, 2, 4)
    assert sem.spat.bias is None
    with pytest.raises(ValueError):
        SemConfig(dim=4, reduced_dim=8, n_spec=2)
