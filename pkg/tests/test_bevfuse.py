import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from occkit.bevfuse import (BevEncoder, BevTensor, OccGridSpec, ResStage, bev_encode, bvre_plan, bvre_sample,
                            channel_to_height, fuse_bev, height_compress, height_to_channel, occ_logits,
                            validate_alignment)
from occkit.errors import ConfigError, ContractError
from occkit.geom import Transform
from occkit.layers import conv2d, upsample_bilinear
from occkit.oracles import dense_conv2d
from occkit.voxel import GridSpec

LO, HI = (-6.4, -6.4), (6.4, 6.4)


def test_height_compress_examples():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(3, 1, 4, 4))
    assert np.array_equal(height_compress(v, np.eye(3), LO, HI).data, v[:, 0])
    assert not height_compress(np.zeros((2, 3, 4, 4)), rng.normal(size=(2, 6)), LO, HI).data.any()
    v2 = rng.normal(size=(1, 2, 4, 4))
    assert np.allclose(height_compress(v2, np.array([[1.0, 1.0]]), LO, HI).data[0], v2[0, 0] + v2[0, 1])


def test_fuse_matches_oracle_and_zero_camera():
    rng = np.random.default_rng(1)
    cam = BevTensor(rng.normal(size=(2, 5, 6)), LO, HI)
    lid = BevTensor(rng.normal(size=(3, 5, 6)), LO, HI)
    w = rng.normal(size=(4, 5, 3, 3))
    out = fuse_bev(cam, lid, w).data
    assert np.abs(out - dense_conv2d(np.concatenate([cam.data, lid.data]), w)).max() < 1e-6
    zero = fuse_bev(cam.with_data(np.zeros_like(cam.data)), lid, w).data
    assert np.allclose(zero, dense_conv2d(np.concatenate([np.zeros((2, 5, 6)), lid.data]), w))


def test_fuse_symmetry_under_weight_permutation():
    rng = np.random.default_rng(2)
    a = BevTensor(rng.normal(size=(2, 4, 4)), LO, HI)
    b = BevTensor(rng.normal(size=(3, 4, 4)), LO, HI)
    w = rng.normal(size=(4, 5, 3, 3))
    w_swapped = np.concatenate([w[:, 2:], w[:, :2]], axis=1)
    assert np.allclose(fuse_bev(a, b, w).data, fuse_bev(b, a, w_swapped).data)


def test_fuse_rejects_mismatch():
    a = BevTensor(np.zeros((1, 4, 4)), LO, HI)
    with pytest.raises(ConfigError):
        fuse_bev(a, BevTensor(np.zeros((1, 4, 5)), LO, HI), np.zeros((1, 2, 3, 3)))
    with pytest.raises(ConfigError):
        fuse_bev(a, BevTensor(np.zeros((1, 4, 4)), (-6.0, -6.4), HI), np.zeros((1, 2, 3, 3)))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from([1, 2]))
def test_conv2d_matches_oracle(seed, stride):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 6, 7))
    w = rng.normal(size=(3, 2, 3, 3))
    assert np.abs(conv2d(x, w, stride) - dense_conv2d(x, w)[:, ::stride, ::stride]).max() < 1e-9


def test_bev_encode_identity_structure():
    c = 4
    enc = BevEncoder.from_seed(0, c, (c, 6, 6), 10)
    for st_ in enc.stages:
        st_.conv2[...] = 0.0  # zero residual branches
    fuse = np.zeros((10, c + 6, 3, 3))
    fuse[np.arange(c), np.arange(c), 1, 1] = 1.0
    enc.fuse = fuse
    x = BevTensor(np.abs(np.random.default_rng(0).normal(size=(c, 8, 8))), LO, HI)
    out = bev_encode(x, enc).data
    assert np.array_equal(out[:c], x.data) and not out[c:].any()


def test_bev_encode_shapes_and_errors():
    enc = BevEncoder.from_seed(0)
    x = BevTensor(np.random.default_rng(0).normal(size=(48, 16, 16)), LO, HI)
    assert bev_encode(x, enc).data.shape == (64, 16, 16)
    with pytest.raises(ConfigError):
        bev_encode(BevTensor(np.zeros((48, 10, 16)), LO, HI), enc)


def test_upsample_constant_and_linear():
    x = np.full((1, 4, 4), 3.0)
    assert np.array_equal(upsample_bilinear(x, 4), np.full((1, 16, 16), 3.0))
    ramp = np.arange(4.0)[None, None, :].repeat(4, axis=1)
    up = upsample_bilinear(ramp, 2)[0, 0]
    # half-pixel aligned: output centre j maps to (j + 0.5) / 2 - 0.5, clamped at the edges
    assert np.allclose(up, np.clip((np.arange(8) + 0.5) / 2 - 0.5, 0, 3))


def _coincident(c=3, n=8):
    occ = OccGridSpec((LO[0], LO[1], -2.4), (HI[0], HI[1], 2.4), (12.8 / n, 12.8 / n, 1.6))
    bev = BevTensor(np.random.default_rng(0).normal(size=(c, n, n)), LO, HI)
    return occ, bev


def test_bvre_coincident_is_exact():
    occ, bev = _coincident()
    f_occ = bvre_sample(bev, occ)
    assert f_occ.shape == (3, 8, 8)
    assert np.array_equal(f_occ, bev.data.transpose(0, 2, 1))


def test_bvre_affine_field_exact():
    n = 16
    lo, hi = (-8.0, -8.0), (8.0, 8.0)
    xs = lo[0] + (np.arange(n) + 0.5)
    ys = lo[1] + (np.arange(n) + 0.5)
    field = (2 * xs[None, :] + 3 * ys[:, None])[None]
    bev = BevTensor(field, lo, hi)
    occ = OccGridSpec((-6.0, -6.0, 0.0), (6.0, 6.0, 1.0), (0.4, 0.4, 1.0), Transform.from_yaw(0.3, (0.7, -0.2, 0)))
    f = bvre_sample(bev, occ)[0]
    from occkit.geom import apply_transform
    pts = apply_transform(occ.t_o2l, occ.centers_xy())
    expected = (2 * pts[:, 0] + 3 * pts[:, 1]).reshape(occ.dims[:2])
    # interior = inside the hull of BEV cell centres, where no edge clamping applies
    interior = np.all((pts[:, :2] >= -7.5) & (pts[:, :2] <= 7.5), axis=1).reshape(occ.dims[:2])
    assert interior.sum() > 0.8 * interior.size
    assert np.abs(f - expected)[interior].max() <= 1e-9


def test_bvre_one_cell_shift():
    occ, bev = _coincident(2, 8)
    cell = 12.8 / 8
    shifted = OccGridSpec(occ.min_bound, occ.max_bound, occ.voxel_size, Transform(np.eye(3), (cell, 0.0, 0.0)))
    f = bvre_sample(bev, shifted)
    # occupancy x index i reads BEV column i + 1; the last column falls outside and is zero
    ref = bev.data.transpose(0, 2, 1)
    assert np.array_equal(f[:, :-1], ref[:, 1:])
    assert not f[:, -1].any()


def test_bvre_outside_extent_is_zero():
    _, bev = _coincident()
    far = OccGridSpec((20.0, 20.0, 0.0), (24.0, 24.0, 1.0), (0.8, 0.8, 1.0))
    assert not bvre_sample(bev, far).any()


def test_bvre_adjoint_identity():
    rng = np.random.default_rng(5)
    bev = BevTensor(rng.normal(size=(2, 8, 8)), LO, HI)
    occ = OccGridSpec((-5.0, -5.0, 0.0), (5.0, 5.0, 1.0), (0.5, 0.5, 1.0), Transform.from_yaw(0.4))
    plan = bvre_plan(bev, occ)
    y = rng.normal(size=(2,) + occ.dims[:2])
    lhs = float((plan.apply(bev.data) * y).sum())
    rhs = float((bev.data * plan.adjoint(y)).sum())
    assert abs(lhs - rhs) < 1e-10


def test_validate_alignment_examples():
    occ = OccGridSpec((-54.0, -54.0, -5.0), (54.0, 54.0, 3.0), (0.4, 0.4, 0.4))
    full = GridSpec((-54.0, -54.0, -5.0), (54.0, 54.0, 3.0), (0.075, 0.075, 0.2))
    r = validate_alignment(occ, full)
    assert round(r.x_ratio, 6) == 135 and r.x_integral and not r.res_integral and not r.aligned
    assert abs(r.res_ratio - 5.3333333) < 1e-6
    occ40 = OccGridSpec((-40.0, -40.0, -1.0), (40.0, 40.0, 5.4), (0.4, 0.4, 0.4))
    assert validate_alignment(occ40, GridSpec((-40.0, -40.0, -1.0), (40.0, 40.0, 5.4), (0.1, 0.1, 0.2))).aligned
    occ5 = OccGridSpec((-30.0, -30.0, -1.0), (30.0, 30.0, 4.0), (0.5, 0.5, 0.5))
    r5 = validate_alignment(occ5, GridSpec((-30.0, -30.0, -1.0), (30.0, 30.0, 5.0), (0.075, 0.075, 0.2)))
    assert r5.x_integral and not r5.res_integral and not r5.aligned


def test_channel_to_height_examples():
    a, b = 1.5, -2.0
    data = np.array([[[a]], [[b]]])
    out = channel_to_height(data, 2)
    assert out.shape == (1, 2, 1, 1) and out[0, :, 0, 0].tolist() == [a, b]
    with pytest.raises(ContractError):
        channel_to_height(np.zeros((5, 2, 2)), 2)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 2 ** 31 - 1))
def test_channel_to_height_round_trip(c, z, seed):
    x = np.random.default_rng(seed).normal(size=(c * z, 3, 2))
    h = channel_to_height(x, z)
    assert np.array_equal(height_to_channel(h), x)
    assert np.array_equal(np.sort(h.ravel()), np.sort(x.ravel()))
    for ci in range(c):
        for zi in range(z):
            assert np.array_equal(h[ci, zi], x[ci * z + zi])


def test_occ_logits_linear_and_checked():
    rng = np.random.default_rng(6)
    f = rng.normal(size=(4, 3, 3))
    w = rng.normal(size=(6, 4))
    out = occ_logits(f, w, 3, 2)
    assert out.shape == (3, 2, 3, 3)
    assert np.allclose(occ_logits(2 * f, w, 3, 2), 2 * out)
    with pytest.raises(ContractError):
        occ_logits(f, w, 4, 2)


def test_occ_spec_validation():
    with pytest.raises(ConfigError):
        OccGridSpec((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (0.3, 0.3, 0.3))
    spec = OccGridSpec((-12.8, -12.8, -2.4), (12.8, 12.8, 2.4), (0.4, 0.4, 0.4))
    assert spec.dims == (64, 64, 12)
    assert OccGridSpec.from_dict(spec.to_dict()).dims == spec.dims


def test_res_stage_skip_projection_used_for_stride():
    enc = BevEncoder.from_seed(0, 4, (4, 6, 6), 8)
    assert enc.stages[0].skip is None
    assert isinstance(enc.stages[1], ResStage) and enc.stages[1].skip.shape == (6, 4)
