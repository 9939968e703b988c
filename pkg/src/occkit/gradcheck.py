"""Finite-difference verification of the hand-written loss and head gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import heads
from .bevfuse import height_to_channel, occ_logits
from .oracles import central_diff_grad, rel_error

TOLERANCE = 1e-4
FD_STEP = 1e-5


@dataclass
class GradRow:
    name: str
    instances: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE

    def to_dict(self) -> dict:
        return {"name": self.name, "instances": self.instances,
                "max_rel_error": self.max_rel_error, "passed": self.passed}


def _rng(seed: int, name: str, i: int) -> np.random.Generator:
    return np.random.default_rng([seed, i, sum(map(ord, name))])


def _ce_case(rng):
    k, z, x, y = 4, 2, 3, 3
    logits = rng.normal(size=(k, z, x, y))
    labels = rng.integers(0, k, size=(z, x, y))
    mask = rng.random((z, x, y)) < 0.7
    mask.flat[0] = True
    return logits, labels, mask


def _focal_case(rng):
    shape = (2, 5, 5)
    hm = rng.uniform(0.05, 0.95, size=shape)
    target = rng.uniform(0.0, 0.9, size=shape)
    target[0, 2, 2] = 1.0
    target[1, rng.integers(5), rng.integers(5)] = 1.0
    return hm, target


def _l1_case(rng):
    c, h, w = heads.REG_CHANNELS, 4, 4
    target = rng.normal(size=(c, h, w))
    # keep every residual well away from the kink at zero
    offset = rng.uniform(0.01, 1.0, size=(c, h, w)) * rng.choice([-1.0, 1.0], size=(c, h, w))
    mask = rng.random((h, w)) < 0.4
    mask.flat[0] = True
    return target + offset, target, mask


def check_ce(rng, corrupt: bool = False) -> float:
    logits, labels, mask = _ce_case(rng)
    _, g = heads.ce_loss(logits, labels, mask)
    if corrupt:
        g = g * 1.01
    fd = central_diff_grad(lambda v: heads.ce_loss(v, labels, mask)[0], logits, FD_STEP)
    return rel_error(g, fd)


def check_focal(rng, corrupt: bool = False) -> float:
    hm, target = _focal_case(rng)
    params = heads.FocalParams()
    _, g = heads.focal_loss(hm, target, params)
    if corrupt:
        g = g * 1.01
    fd = central_diff_grad(lambda v: heads.focal_loss(v, target, params)[0], hm, FD_STEP)
    return rel_error(g, fd)


def check_l1(rng, corrupt: bool = False) -> float:
    pred, target, mask = _l1_case(rng)
    _, g = heads.l1_loss(pred, target, mask)
    if corrupt:
        g = g * 1.01
    fd = central_diff_grad(lambda v: heads.l1_loss(v, target, mask)[0], pred, FD_STEP)
    return rel_error(g, fd)


def check_head_backprop(rng, corrupt: bool = False) -> float:
    """Both the CE path (occupancy head) and the focal path (heatmap head),
    differentiated with respect to weights and input features."""
    k, z, c, x, y = 3, 2, 5, 3, 3
    f = rng.normal(size=(c, x, y))
    w = rng.normal(size=(k * z, c)) * 0.5
    labels = rng.integers(0, k, size=(z, x, y))
    mask = np.ones((z, x, y), dtype=bool)

    def ce_of(fv, wv):
        return heads.ce_loss(occ_logits(fv, wv, k, z), labels, mask)

    _, g = ce_of(f, w)
    gf, gw = heads.head_backprop(height_to_channel(g), w, f)

    k_det = 2
    wh = rng.normal(size=(k_det, c)) * 0.3
    tgt = rng.uniform(0.0, 0.9, size=(k_det, x, y))
    tgt[:, 1, 1] = 1.0
    params = heads.FocalParams()

    def focal_of(fv, wv):
        p, dp = heads.sigmoid_clamped(heads.head_forward(fv, wv))
        loss, gp = heads.focal_loss(p, tgt, params)
        return loss, gp * dp

    _, gl = focal_of(f, wh)
    hf, hw = heads.head_backprop(gl, wh, f)
    if corrupt:
        gf, gw, hf, hw = gf * 1.01, gw * 1.01, hf * 1.01, hw * 1.01

    errs = [
        rel_error(gf, central_diff_grad(lambda v: ce_of(v, w)[0], f, FD_STEP)),
        rel_error(gw, central_diff_grad(lambda v: ce_of(f, v)[0], w, FD_STEP)),
        rel_error(hf, central_diff_grad(lambda v: focal_of(v, wh)[0], f, FD_STEP)),
        rel_error(hw, central_diff_grad(lambda v: focal_of(f, v)[0], wh, FD_STEP)),
    ]
    return max(errs)


CHECKS = {
    "ce": check_ce,
    "focal": check_focal,
    "l1": check_l1,
    "head_backprop": check_head_backprop,
}


def run_gradcheck(seed: int = 0, instances: int = 20, corrupt: str | None = None) -> list:
    """One row per check; ``corrupt`` names a check whose analytic gradient is
    deliberately perturbed by 1% (negative control)."""
    rows = []
    for name, fn in CHECKS.items():
        worst = max(fn(_rng(seed, name, i), corrupt == name) for i in range(instances))
        rows.append(GradRow(name, instances, worst))
    return rows
