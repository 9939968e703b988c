import sys

import numpy as np
import pytest

from occkit import pipeline
from occkit.config import PipelineConfig
from occkit.metrics import OccupancyGrid
from occkit.scenegen import camera_visibility_mask, generate_scene, rasterize_gt, simulate_lidar


class Desk:
    """One seeded desk-profile scene with its forward pass, shared by the suite."""

    def __init__(self, seed=0):
        self.cfg = PipelineConfig(seed=seed)
        self.rig = self.cfg.rig()
        self.scene = generate_scene(seed, self.cfg.scene_spec)
        self.cloud = simulate_lidar(self.scene, self.rig)
        gt = rasterize_gt(self.scene, self.cfg.occ_spec, self.cfg.num_classes)
        self.gt = OccupancyGrid(gt.spec, gt.labels, camera_visibility_mask(gt, self.rig), gt.num_classes)
        self.weights = pipeline.NetworkWeights.from_config(self.cfg)
        self.result = pipeline.forward(self.cfg, self.scene, self.cloud, self.gt, self.rig, self.weights)


@pytest.fixture(scope="session")
def desk():
    return Desk(0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
