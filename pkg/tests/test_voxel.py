import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from occkit.errors import ConfigError, ContractError
from occkit.oracles import dense_conv3d
from occkit.sweeps import random_sparse_grid, sparse_conv_sweep
from occkit.voxel import (ConvKernel3D, GridSpec, LidarEncoder, SparseVoxelGrid, densify, lidar_encode,
                          read_points, sparse_conv3d, voxelize, write_points)

UNIT = GridSpec((0.0, 0.0, 0.0), (4.0, 4.0, 4.0), (1.0, 1.0, 1.0))


def test_gridspec_dims_are_zyx():
    g = GridSpec((-12.8, -12.8, -2.4), (12.8, 12.8, 2.4), (0.2, 0.2, 0.3))
    assert g.dims == (16, 128, 128)


def test_gridspec_rejects_fractional_extent():
    with pytest.raises(ConfigError):
        GridSpec((0.0, 0.0, 0.0), (1.0, 1.0, 1.05), (0.1, 0.1, 0.1))
    with pytest.raises(ConfigError):
        GridSpec((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (0.1, 0.0, 0.1))


def test_voxel_mean_of_three_points():
    cloud = np.array([[0.1, 0.1, 0.1, 1.0], [0.2, 0.5, 0.3, 2.0], [0.9, 0.9, 0.9, 3.0]])
    g = voxelize(cloud, UNIT)
    assert len(g) == 1 and g.feats[0, 3] == 2.0
    assert np.allclose(g.feats[0, :3], cloud[:, :3].mean(axis=0))


def test_voxel_keeps_first_ten_in_input_order():
    rng = np.random.default_rng(1)
    pts = np.column_stack([rng.uniform(1.0, 2.0, size=(12, 3)), np.arange(12.0)])
    g = voxelize(pts, UNIT)
    assert g.feats[0, 3] == np.mean(np.arange(10.0))


def test_voxel_face_goes_to_next_cell_and_max_face_drops():
    cloud = np.array([[1.0, 0.5, 0.5, 0.0], [4.0, 0.5, 0.5, 0.0]])
    g = voxelize(cloud, UNIT)
    assert g.coords.tolist() == [[0, 0, 1]]


def test_voxelize_empty_and_out_of_range():
    assert len(voxelize(np.zeros((0, 4)), UNIT)) == 0
    assert len(voxelize(np.array([[-1.0, 0.0, 0.0, 0.0]]), UNIT)) == 0


def test_voxelize_rejects_nan():
    with pytest.raises(ContractError):
        voxelize(np.array([[np.nan, 0.0, 0.0, 0.0]]), UNIT)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 200), st.integers(0, 2 ** 31 - 1))
def test_voxelize_count_bound_and_mass(n, seed):
    rng = np.random.default_rng(seed)
    cloud = np.column_stack([rng.uniform(-0.5, 4.5, size=(n, 3)), rng.normal(size=n)])
    g = voxelize(cloud, UNIT, max_points=3)
    assert len(g) <= min(n, 64)
    keys = g.keys()
    assert np.all(np.diff(keys) > 0)
    # recompute each voxel's kept-point mass from the raw points
    idx = np.floor(cloud[:, :3]).astype(int)
    inside = np.all((idx >= 0) & (idx < 4), axis=1)
    for coord, feat in zip(g.coords, g.feats):
        members = np.flatnonzero(inside & np.all(idx[:, ::-1] == coord, axis=1))[:3]
        assert np.allclose(feat, cloud[members].mean(axis=0))


def test_densify():
    g = SparseVoxelGrid([[1, 2, 3]], [[5.0, -1.0]], (2, 3, 4))
    d = densify(g)
    assert d.shape == (2, 2, 3, 4)
    assert d[:, 1, 2, 3].tolist() == [5.0, -1.0] and np.count_nonzero(d) == 2
    assert not densify(SparseVoxelGrid(np.zeros((0, 3)), np.zeros((0, 2)), (2, 2, 2))).any()


def test_identity_kernel_submanifold_is_identity():
    rng = np.random.default_rng(0)
    g = random_sparse_grid(rng)
    w = np.zeros((g.channels, g.channels, 3, 3, 3))
    w[:, :, 1, 1, 1] = np.eye(g.channels)
    out = sparse_conv3d(g, ConvKernel3D(w))
    assert np.array_equal(out.coords, g.coords) and np.array_equal(out.feats, g.feats)


def test_single_voxel_all_ones_regular():
    g = SparseVoxelGrid([[2, 2, 2]], [[1.5, 2.5]], (5, 5, 5))
    w = np.ones((1, 2, 3, 3, 3))
    out = sparse_conv3d(g, ConvKernel3D(w, 1, "regular"))
    assert len(out) == 27
    assert np.all(out.feats == 4.0)
    assert np.array_equal(densify(out), dense_conv3d(densify(g), w))


def test_stride_two_matches_decimated_dense():
    rng = np.random.default_rng(5)
    coords = np.argwhere(rng.random((8, 8, 8)) < 0.2)
    g = SparseVoxelGrid(coords, rng.normal(size=(len(coords), 2)), (8, 8, 8))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    out = sparse_conv3d(g, ConvKernel3D(w, (2, 2, 2), "regular"))
    assert out.dims == (4, 4, 4)
    assert np.abs(densify(out) - dense_conv3d(densify(g), w, (2, 2, 2))).max() < 1e-5


def test_sparse_conv_sweep_passes():
    assert all(r.passed for r in sparse_conv_sweep(seed=7, trials=10))


def test_channel_mismatch_raises():
    g = SparseVoxelGrid([[0, 0, 0]], [[1.0]], (2, 2, 2))
    with pytest.raises(ContractError):
        sparse_conv3d(g, ConvKernel3D(np.ones((1, 2, 3, 3, 3))))


def test_kernel_validation():
    with pytest.raises(ContractError):
        ConvKernel3D(np.ones((1, 1, 2, 2, 2)))
    with pytest.raises(ContractError):
        ConvKernel3D(np.ones((1, 1, 3, 3, 3)), (2, 2, 2), "submanifold")
    with pytest.raises(ContractError):
        ConvKernel3D(np.ones((1, 1, 3, 3, 3)), 0, "regular")


def test_lidar_encoder_shape_and_zero_input():
    spec = GridSpec((-12.8, -12.8, -2.4), (12.8, 12.8, 2.4), (0.2, 0.2, 0.3))
    enc = LidarEncoder.from_seed(0)
    empty = voxelize(np.zeros((0, 4)), spec)
    out = lidar_encode(empty, enc)
    assert out.shape == (32, 1, 16, 16) and not out.any()


def test_lidar_encoder_rejects_bad_dims():
    g = SparseVoxelGrid(np.zeros((0, 3)), np.zeros((0, 4)), (8, 16, 16))
    with pytest.raises(ConfigError):
        lidar_encode(g, LidarEncoder.from_seed(0))


def test_lidar_encoder_linear_without_activations():
    rng = np.random.default_rng(3)
    coords = np.argwhere(rng.random((16, 16, 16)) < 0.05)
    g = SparseVoxelGrid(coords, rng.normal(size=(len(coords), 4)), (16, 16, 16))
    enc = LidarEncoder.from_seed(4)
    a = 2.5
    base = lidar_encode(g, enc, activations=False)
    scaled = lidar_encode(SparseVoxelGrid(coords, a * g.feats, g.dims), enc, activations=False)
    assert np.abs(scaled - a * base).max() <= 1e-6 * max(1.0, np.abs(base).max())


def test_lidar_encoder_deterministic_per_seed(desk):
    g = voxelize(desk.cloud, desk.cfg.lidar_grid)
    a = lidar_encode(g, LidarEncoder.from_seed(0))
    b = lidar_encode(g, LidarEncoder.from_seed(0))
    c = lidar_encode(g, LidarEncoder.from_seed(1))
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_points_file_round_trip(tmp_path):
    cloud = np.random.default_rng(0).normal(size=(33, 4)).astype(np.float32).astype(np.float64)
    p = tmp_path / "pts.bin"
    write_points(p, cloud)
    assert p.stat().st_size == 16 * 33
    assert np.array_equal(read_points(p), cloud)
    assert np.array_equal(np.fromfile(p, dtype="<f4").reshape(-1, 4), cloud)


def test_points_file_bad_length(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"\x00" * 17)
    with pytest.raises(ContractError):
        read_points(p)
