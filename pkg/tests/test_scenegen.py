import math

import numpy as np
import pytest

from occkit.bevfuse import OccGridSpec
from occkit.errors import ConfigError, GenerationError
from occkit.heads import Box3D
from occkit.metrics import OccupancyGrid
from occkit.scenegen import (FREE, GROUND, VEHICLE, Scene, SceneSpec, SensorRig, box_footprint,
                             camera_visibility_mask, generate_scene, overlap_volume, rasterize_gt,
                             render_camera_features, simulate_lidar, surround_camera, _to_local)


def test_generate_deterministic():
    a, b = generate_scene(7), generate_scene(7)
    assert a.to_dict() == b.to_dict()
    assert generate_scene(8).to_dict() != a.to_dict()
    assert Scene.from_dict(a.to_dict()).to_dict() == a.to_dict()


def test_box_count_range():
    s = generate_scene(3, SceneSpec(box_count=(3, 3)))
    assert len(s.boxes) == 3
    for seed in range(5):
        n = len(generate_scene(seed).boxes)
        assert 6 <= n <= 10
    with pytest.raises(ConfigError):
        SceneSpec(box_count=(4, 2))


@pytest.mark.parametrize("seed", range(6))
def test_boxes_valid(seed):
    spec = SceneSpec()
    s = generate_scene(seed, spec)
    for b in s.boxes:
        corners = box_footprint(b)
        assert np.all(corners >= np.array(spec.min_xy)) and np.all(corners <= np.array(spec.max_xy))
        assert math.isclose(b.center[2] - b.size[2] / 2, spec.ground_z)
    for i, a in enumerate(s.boxes):
        for b in s.boxes[i + 1:]:
            assert overlap_volume(a, b) <= 0.1 * min(np.prod(a.size), np.prod(b.size))


def test_generation_failure():
    # far more boxes than fit in a 6 m square
    with pytest.raises(GenerationError):
        generate_scene(0, SceneSpec(min_xy=(-3, -3), max_xy=(3, 3), box_count=(40, 40), clear_radius=0.1))


def half_metre_spec():
    return OccGridSpec((-2.0, -2.0, -2.0), (2.0, 2.0, 2.0), (0.5, 0.5, 0.5))


def test_rasterize_inside_and_faces():
    spec = half_metre_spec()
    inside = Scene(-10.0, [Box3D((0.5, 0.5, 0.5), (1.0, 1.0, 1.0), 0.0, 0)], (-2, -2), (2, 2), 0)
    g = rasterize_gt(inside, spec)
    assert (g.labels == VEHICLE).sum() == 8
    assert np.all(g.labels[4:6, 4:6, 4:6] == VEHICLE)
    # faces at -0.25 and 0.75 pass exactly through voxel centres: those stay outside
    on_face = Scene(-10.0, [Box3D((0.25, 0.25, 0.25), (1.0, 1.0, 1.0), 0.0, 0)], (-2, -2), (2, 2), 0)
    g = rasterize_gt(on_face, spec)
    assert (g.labels == VEHICLE).sum() == 1 and g.labels[4, 4, 4] == VEHICLE


def test_rasterize_ground_and_free():
    empty = Scene(0.0, [], (-2, -2), (2, 2), 0)
    above = OccGridSpec((-2.0, -2.0, 0.0), (2.0, 2.0, 2.0), (0.5, 0.5, 0.5))
    assert np.all(rasterize_gt(empty, above).labels == FREE)
    g = rasterize_gt(empty, half_metre_spec())
    assert np.all(g.labels[:, :, :4] == GROUND) and np.all(g.labels[:, :, 4:] == FREE)


def test_rasterize_later_box_wins():
    spec = half_metre_spec()
    boxes = [Box3D((0.5, 0.5, 0.5), (1.0, 1.0, 1.0), 0.0, 0), Box3D((0.5, 0.5, 0.5), (1.0, 1.0, 1.0), 0.0, 2)]
    g = rasterize_gt(Scene(-10.0, boxes, (-2, -2), (2, 2), 0), spec)
    assert np.all(g.labels[4:6, 4:6, 4:6] == 4)


def box_sdf(box, pts):
    q = np.abs(_to_local(box, pts)) - np.asarray(box.size) / 2.0
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    return outside + np.minimum(q.max(axis=1), 0.0)


def test_lidar_points_on_surfaces(desk):
    pts = desk.cloud[:, :3]
    dist = np.abs(pts[:, 2] - desk.scene.ground_z)
    for b in desk.scene.boxes:
        dist = np.minimum(dist, np.abs(box_sdf(b, pts)))
    assert dist.max() <= 1e-6
    assert len(desk.cloud) <= len(desk.rig.beam_directions())
    assert np.array_equal(simulate_lidar(desk.scene, desk.rig), desk.cloud)


def test_lidar_intensity_codes_class():
    scene = Scene(-1.6, [], (-12.8, -12.8), (12.8, 12.8), 0)
    cloud = simulate_lidar(scene, SensorRig())
    # upper beams miss everything, lower beams hit the ground (class 1 -> 0.2)
    assert 0 < len(cloud) < 1024 * 32
    assert abs(cloud[:, 3].mean() - 0.2) < 0.005
    assert abs(cloud[:, 3].std() - 0.01) < 0.002


def test_gt_lidar_consistency(desk):
    spec = desk.gt.spec
    pts = desk.cloud[:, :3]
    lo, vs, dims = np.asarray(spec.min_bound), np.asarray(spec.voxel_size), np.array(spec.dims)
    idx = np.floor((pts - lo) / vs).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < dims), axis=1)
    occ = np.pad(desk.gt.labels != FREE, 1)
    offsets = np.stack(np.meshgrid(*[np.arange(3)] * 3, indexing="ij"), -1).reshape(-1, 3)
    band = np.zeros(int(inside.sum()), dtype=bool)
    for off in offsets:
        j = idx[inside] + off  # padded coordinates of each neighbour
        band |= occ[j[:, 0], j[:, 1], j[:, 2]]
    assert inside.sum() > 1000 and band.all()


def single_camera_rig():
    return SensorRig(cameras=[surround_camera(0.0)])


def test_camera_features_depth_nine():
    # front face of the vehicle at x = 9 in front of a camera at the origin looking along +x
    scene = Scene(-50.0, [Box3D((10.0, 0.0, 0.0), (2.0, 4.0, 2.0), 0.0, 0)], (-20, -20), (20, 20), 0)
    (fmap,) = render_camera_features(scene, single_camera_rig(), 16, 6)
    hit = fmap[VEHICLE] > 0
    assert hit.sum() > 10
    assert np.abs(fmap[VEHICLE][hit] - 0.1).max() <= 1e-12
    # pixels that miss everything are zero vectors
    empty = Scene(-50.0, [], (-20, -20), (20, 20), 0)
    (blank,) = render_camera_features(empty, single_camera_rig(), 16, 6)
    assert np.all(blank[:, : blank.shape[1] // 2] == 0.0)
    with pytest.raises(ConfigError):
        render_camera_features(scene, single_camera_rig(), 4, 6)


def test_camera_features_deterministic(desk):
    a = render_camera_features(desk.scene, desk.rig)
    b = render_camera_features(desk.scene, desk.rig)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_visibility_occlusion():
    spec = OccGridSpec((-12.8, -12.8, -2.4), (12.8, 12.8, 2.4), (0.4, 0.4, 0.4))
    labels = np.zeros(spec.dims, dtype=np.int64)
    labels[42, 32, 6] = VEHICLE  # wall voxel centred at (4.2, 0.2, 0.2)
    labels[44, 32, 6] = VEHICLE  # target behind it at (5.0, 0.2, 0.2)
    mask = camera_visibility_mask(OccupancyGrid(spec, labels, None, 6), single_camera_rig())
    assert mask[42, 32, 6]
    assert not mask[44, 32, 6]
    assert mask[40, 32, 6]        # free voxel in front of the wall
    assert not mask[18, 32, 6]    # behind the camera, outside every frustum
    assert not mask[44, 0, 6]     # far off to the side
