"""Differentiable 2D warping of reference-image coordinates.

For each sample point and each reference image, a three-layer MLP predicts
a pixel offset (du, dv) from the encoded point, the filtered condition
vector, and the reference feature sampled at the unwarped projection. The
offset output layer starts at exactly zero so the joint stage begins from
the identity warp.

The regularizer penalizes offset magnitude per (point, reference) pair,
weighted by (1 - alpha_p) where alpha_p is the point's opacity: points the
renderer already considers solid may move freely, near-empty ones may not.
Alphas enter as plain numbers, never through the gradient graph, so the
field cannot shrink densities to dodge the penalty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dynfield import diffmath as dm
from dynfield.diffmath import DTensor
from dynfield.radiance import encoded_dim, positional_encode

REG_EPS = 1e-12


@dataclass(frozen=True)
class Offset:
    du: float
    dv: float


@dataclass(frozen=True)
class WarpConfig:
    hidden: int = 128
    condition_dim: int = 32
    feature_dim: int = 128
    l_pos: int = 10

    @property
    def in_dim(self) -> int:
        return encoded_dim(self.l_pos) + self.condition_dim + self.feature_dim


class WarpModule:
    """Three-layer offset MLP: relu, relu, linear 2-unit output."""

    def __init__(self, cfg: WarpConfig, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        dt = dm.float_dtype()
        h = cfg.hidden

        def gauss(shape, scale):
            return DTensor(np.asarray(rng.standard_normal(shape) * scale, dt),
                           requires_grad=True)

        self.p: dict[str, DTensor] = {
            "l0.w": gauss((cfg.in_dim, h), np.sqrt(2.0 / cfg.in_dim)),
            "l0.b": DTensor(np.zeros(h, dt), requires_grad=True),
            "l1.w": gauss((h, h), np.sqrt(2.0 / h)),
            "l1.b": DTensor(np.zeros(h, dt), requires_grad=True),
            # zero output layer: initial offsets are exactly (0, 0)
            "l2.w": DTensor(np.zeros((h, 2), dt), requires_grad=True),
            "l2.b": DTensor(np.zeros(2, dt), requires_grad=True),
        }

    def __call__(self, points: DTensor, condition: DTensor, features: DTensor) -> DTensor:
        """Offsets (P, 2) for (P, 3) points against one reference.

        ``condition`` is the (d_a,) filtered condition vector; ``features``
        are the (P, D) reference features at the unwarped projections.
        """
        cfg = self.cfg
        if points.ndim != 2 or points.shape[1] != 3:
            raise dm.ShapeError(f"points must be (P, 3), got {points.shape}")
        if condition.shape != (cfg.condition_dim,):
            raise dm.ShapeError(f"condition must be ({cfg.condition_dim},), got {condition.shape}")
        if features.shape != (points.shape[0], cfg.feature_dim):
            raise dm.ShapeError(f"features must be (P, {cfg.feature_dim}), got {features.shape}")

        cond_tiled = dm.broadcast(condition, (points.shape[0], cfg.condition_dim))
        x = dm.concat([positional_encode(points, cfg.l_pos), cond_tiled, features], axis=1)
        h = dm.relu(dm.add(dm.matmul(x, self.p["l0.w"]), self.p["l0.b"]))
        h = dm.relu(dm.add(dm.matmul(h, self.p["l1.w"]), self.p["l1.b"]))
        return dm.add(dm.matmul(h, self.p["l2.w"]), self.p["l2.b"])


def predict_offset(warp: WarpModule, p, condition: DTensor, feature: DTensor) -> Offset:
    """Single-point convenience wrapper."""
    pts = dm.reshape(p if isinstance(p, DTensor) else dm.tensor(p), (1, 3))
    feat = dm.reshape(feature, (1, warp.cfg.feature_dim))
    out = warp(pts, condition, feat)
    return Offset(float(out.data[0, 0]), float(out.data[0, 1]))


def warp_coord(at, offset: Offset):
    """(u', v') = (u + du, v + dv) for a single coordinate pair."""
    from dynfield.geometry import ImageCoord

    return ImageCoord(at.u + offset.du, at.v + offset.dv)


def offset_regularizer(offsets: list[DTensor], alphas: np.ndarray) -> DTensor:
    """Density-weighted mean offset magnitude, a scalar.

    ``offsets`` holds one (P, 2) tensor per reference; ``alphas`` is a plain
    (P,) array of opacities in [0, 1] shared across references. Returns
    (1/(N*P)) * sum_n sum_p (1 - alpha_p) * sqrt(du^2 + dv^2 + eps).
    """
    if not offsets:
        raise dm.ShapeError("offset_regularizer: need at least one reference")
    alphas = np.asarray(alphas)
    n_pts = alphas.shape[0]
    for o in offsets:
        if o.shape != (n_pts, 2):
            raise dm.ShapeError(f"offset_regularizer: offsets {o.shape} do not align "
                                f"with {n_pts} alphas")
    weight = DTensor(np.asarray(1.0 - alphas, dm.float_dtype()))
    total = None
    for o in offsets:
        mag = dm.sqrt(dm.add(dm.sum_(dm.mul(o, o), axis=1), REG_EPS))
        term = dm.sum_(dm.mul(mag, weight))
        total = term if total is None else dm.add(total, term)
    return dm.mul(total, 1.0 / (len(offsets) * n_pts))
