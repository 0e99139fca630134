import numpy as np
import pytest
from hypothesis import given, strategies as st

from slotground.fusion import (adapter, bca_fuse, channel_exchange, css, exchange_mask, init_adapter, init_bca,
                               spatial_exchange, spatial_swap)
from slotground.numkit import REGISTRY, check_grad, constant, layer_norm, make_rng

P_GRID = [0.0, 0.25, 0.5, 1.0]


@given(st.sampled_from(P_GRID), st.integers(0, 10_000))
def test_channel_exchange_involution(p, seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(8, 3, 3)), r.normal(size=(8, 3, 3))
    once = channel_exchange(a, b, p)
    twice = channel_exchange(once.a, once.b, p)
    assert np.array_equal(twice.a.data, a) and np.array_equal(twice.b.data, b)


def test_channel_exchange_p0_p1(rng):
    a, b = rng.normal(size=(4, 2, 2)), rng.normal(size=(4, 2, 2))
    zero, full = channel_exchange(a, b, 0.0), channel_exchange(a, b, 1.0)
    assert np.array_equal(zero.a.data, a) and np.array_equal(zero.b.data, b)
    assert np.array_equal(full.a.data, b) and np.array_equal(full.b.data, a)


@pytest.mark.parametrize("p,n", [(0.25, 8), (0.5, 8), (0.25, 32), (1 / 3, 9)])
def test_mask_fraction_within_one_over_n(p, n):
    m = exchange_mask(n, p)
    assert abs(m.mean() - p) <= 1.0 / n + 1e-12
    assert np.array_equal(np.flatnonzero(m), np.arange(0, n, round(1 / p)))


def test_exchange_errors(rng):
    with pytest.raises(ValueError):
        channel_exchange(np.zeros((2, 2, 2)), np.zeros((3, 2, 2)), 0.5)
    with pytest.raises(ValueError):
        exchange_mask(4, 1.5)


def test_spatial_exchange_examples(rng):
    a, b = rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 4))
    assert np.array_equal(spatial_exchange(a, a, 0.0).data, a)
    np.testing.assert_allclose(spatial_exchange(a, b, 0.0).data, (a + b) / 2, atol=1e-15)
    assert np.array_equal(spatial_exchange(a, b, 1.0).data, spatial_exchange(a, b, 0.0).data)
    rows = spatial_swap(a, b, 0.5).exchange_mask_spatial
    assert list(np.flatnonzero(rows)) == [0, 2]


def test_css_is_mean_of_sources(rng):
    # exchanges only relabel values between the two maps, so the mean fusion is swap independent
    a, b = rng.normal(size=(4, 4, 4)), rng.normal(size=(4, 4, 4))
    np.testing.assert_allclose(css(a, b, 0.25).data, (a + b) / 2, atol=1e-15)


# ---------------------------------------------------------------- adapters

def test_adapter_identity_construction(rng):
    d = 4
    p = init_adapter(rng, d, d, "adapter_3d.")
    eye = np.eye(d)
    # GELU(x) - GELU(-x) = x, so [I; -I] then [I, -I] passes the normalised input through
    p["adapter_3d.fc1.W"] = constant(np.vstack([eye, -eye]))
    p["adapter_3d.fc2.W"] = constant(np.hstack([eye, -eye]))
    p["adapter_3d.head.W"] = constant(eye)
    for k in ("fc1.b", "fc2.b", "head.b"):
        p["adapter_3d." + k] = constant(np.zeros_like(p["adapter_3d." + k].data))
    x = rng.normal(size=(5, d))
    np.testing.assert_allclose(adapter(x, p, "3d").data, layer_norm(x).data, atol=1e-12)


def test_adapter_zero_head(rng):
    p = init_adapter(rng, 4, 4, "adapter_2d.")
    p["adapter_2d.head.W"] = constant(np.zeros((4, 4)))
    assert np.array_equal(adapter(rng.normal(size=(4, 3, 3)), p, "2d").data, np.zeros((4, 3, 3)))


def test_adapter_width_mismatch(rng):
    p = init_adapter(rng, 4, 4, "adapter_3d.")
    with pytest.raises(ValueError):
        adapter(rng.normal(size=(2, 5)), p, "3d")


def test_adapter_gradients():
    f, p, names = REGISTRY["adapter"]()
    assert check_grad(f, p, names).ok


# ---------------------------------------------------------------- BCA

def test_bca_zero_output_projection_is_residual(rng):
    p = init_bca(rng, 4)
    p["bca.2d_pc.o.W"] = constant(np.zeros((4, 4)))
    p["bca.pc_2d.o.W"] = constant(np.zeros((4, 4)))
    h2d, hpc = rng.normal(size=(6, 4)), rng.normal(size=(3, 4))
    z2d, zpc = bca_fuse(h2d, hpc, p)
    assert np.array_equal(z2d.data, h2d) and np.array_equal(zpc.data, hpc)


def test_bca_single_key_closed_form(rng):
    p = init_bca(rng, 4)
    h2d, hpc = rng.normal(size=(6, 4)), rng.normal(size=(1, 4))
    z2d, _, w2, _ = bca_fuse(h2d, hpc, p, return_weights=True)
    assert np.array_equal(w2.data, np.ones((6, 1)))
    proj = (hpc @ p["bca.2d_pc.v.W"].data.T) @ p["bca.2d_pc.o.W"].data.T
    np.testing.assert_allclose(z2d.data - h2d, np.broadcast_to(proj, (6, 4)), atol=1e-12)


@given(st.integers(0, 10_000), st.integers(1, 7), st.integers(1, 7))
def test_bca_rows_sum_to_one_and_shapes(seed, L2, Lp):
    r = make_rng(seed)
    p = init_bca(r, 4)
    z2d, zpc, w2, wp = bca_fuse(r.normal(size=(L2, 4)), r.normal(size=(Lp, 4)), p, return_weights=True)
    assert z2d.shape == (L2, 4) and zpc.shape == (Lp, 4)
    np.testing.assert_allclose(w2.data.sum(-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(wp.data.sum(-1), 1.0, atol=1e-12)


def test_bca_width_mismatch(rng):
    with pytest.raises(ValueError):
        bca_fuse(rng.normal(size=(2, 4)), rng.normal(size=(2, 3)), init_bca(rng, 4))


def test_bca_gradients():
    f, p, names = REGISTRY["bca"]()
    assert check_grad(f, p, names).ok
