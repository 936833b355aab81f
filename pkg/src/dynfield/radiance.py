"""Positional encoding and the conditioned radiance field.

The field maps a world point p, a unit view direction d, a filtered
condition vector A, and an aggregated reference feature to color and
density. The trunk MLP consumes [gamma(p), A, feature] with the input
re-concatenated at a configurable skip layer; the density head reads the
trunk alone (softplus keeps sigma nonnegative and makes density independent
of the view direction by construction), while the color head additionally
consumes gamma(d) and ends in a sigmoid.

Callers are expected to pre-normalize scene coordinates into [-1, 1]^3 with
the dataset's world scale so the encoding frequencies stay meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dynfield import diffmath as dm
from dynfield.diffmath import DTensor

L_POS = 10
L_DIR = 4


def encoded_dim(l_levels: int) -> int:
    return 3 + 2 * 3 * l_levels


def positional_encode(x: DTensor, l_levels: int) -> DTensor:
    """(P, 3) -> (P, 3 + 6L): identity, then sin/cos at frequencies 2^j * pi."""
    parts = [x]
    for j in range(l_levels):
        scaled = dm.mul(x, float((2.0 ** j) * np.pi))
        parts.append(dm.sin(scaled))
        parts.append(dm.cos(scaled))
    return dm.concat(parts, axis=1)


@dataclass(frozen=True)
class FieldConfig:
    trunk_depth: int = 8
    trunk_width: int = 256
    skip_at: int = 5          # input re-concatenated before this (1-based) layer
    condition_dim: int = 32
    feature_dim: int = 128
    l_pos: int = L_POS
    l_dir: int = L_DIR

    def __post_init__(self):
        if not (1 < self.skip_at <= self.trunk_depth):
            raise ValueError(f"skip_at must be in (1, trunk_depth], got {self.skip_at}")

    @property
    def in_dim(self) -> int:
        return encoded_dim(self.l_pos) + self.condition_dim + self.feature_dim


def desk_field_config(condition_dim: int = 32, feature_dim: int = 128) -> FieldConfig:
    """Small trunk for CPU-budget experiments."""
    return FieldConfig(trunk_depth=4, trunk_width=128, skip_at=3,
                       condition_dim=condition_dim, feature_dim=feature_dim)


class RadianceField:
    """Trunk MLP with a density head and a direction-conditioned color head."""

    def __init__(self, cfg: FieldConfig, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        dt = dm.float_dtype()
        width = cfg.trunk_width
        chead_width = max(width // 2, 16)
        self.p: dict[str, DTensor] = {}

        def lin(name, fan_in, fan_out, gain):
            w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(gain / fan_in)
            self.p[f"{name}.w"] = DTensor(np.asarray(w, dt), requires_grad=True)
            self.p[f"{name}.b"] = DTensor(np.zeros(fan_out, dt), requires_grad=True)

        d_in = cfg.in_dim
        for i in range(cfg.trunk_depth):
            fan_in = d_in if i == 0 else width
            if i + 1 == cfg.skip_at:
                fan_in += d_in if i > 0 else 0
            lin(f"l{i}", fan_in, width, 2.0)
        lin("sigma", width, 1, 1.0)
        d_dir = encoded_dim(cfg.l_dir)
        lin("chead0", width + d_dir, chead_width, 2.0)
        lin("chead1", chead_width, 3, 1.0)

    def __call__(self, points: DTensor, dirs: DTensor, condition: DTensor,
                 features: DTensor) -> tuple[DTensor, DTensor]:
        """Evaluate the field at (P, 3) points.

        ``dirs`` are (P, 3) unit vectors, ``condition`` is a (d_a,) vector
        shared by all points, ``features`` is (P, D). Returns color (P, 3)
        in [0,1] and density (P, 1) >= 0.
        """
        cfg = self.cfg
        if points.ndim != 2 or points.shape[1] != 3:
            raise dm.ShapeError(f"points must be (P, 3), got {points.shape}")
        if dirs.shape != points.shape:
            raise dm.ShapeError(f"directions {dirs.shape} must match points {points.shape}")
        norms = np.linalg.norm(np.asarray(dirs.data, dtype=np.float64), axis=1)
        if np.abs(norms - 1.0).max() > 1e-5:
            raise ValueError("view directions must be unit vectors")
        if condition.shape != (cfg.condition_dim,):
            raise dm.ShapeError(f"condition must be ({cfg.condition_dim},), got {condition.shape}")
        if features.shape != (points.shape[0], cfg.feature_dim):
            raise dm.ShapeError(f"features must be (P, {cfg.feature_dim}), got {features.shape}")

        n_pts = points.shape[0]
        cond_tiled = dm.broadcast(condition, (n_pts, cfg.condition_dim))
        x_in = dm.concat([positional_encode(points, cfg.l_pos), cond_tiled, features], axis=1)

        h = x_in
        for i in range(cfg.trunk_depth):
            if i + 1 == cfg.skip_at and i > 0:
                h = dm.concat([h, x_in], axis=1)
            h = dm.relu(dm.add(dm.matmul(h, self.p[f"l{i}.w"]), self.p[f"l{i}.b"]))

        sigma = dm.softplus(dm.add(dm.matmul(h, self.p["sigma.w"]), self.p["sigma.b"]))

        enc_d = positional_encode(dirs, cfg.l_dir)
        hc = dm.concat([h, enc_d], axis=1)
        hc = dm.relu(dm.add(dm.matmul(hc, self.p["chead0.w"]), self.p["chead0.b"]))
        color = dm.sigmoid(dm.add(dm.matmul(hc, self.p["chead1.w"]), self.p["chead1.b"]))
        return color, sigma


def field_eval(field: RadianceField, p, d, condition: DTensor, feature: DTensor
               ) -> tuple[DTensor, DTensor]:
    """Single-point wrapper: 3-vectors in, ((3,) color, scalar density) out."""
    pts = dm.reshape(p if isinstance(p, DTensor) else dm.tensor(p), (1, 3))
    drs = dm.reshape(d if isinstance(d, DTensor) else dm.tensor(d), (1, 3))
    feat = dm.reshape(feature, (1, field.cfg.feature_dim))
    color, sigma = field(pts, drs, condition, feat)
    return dm.reshape(color, (3,)), dm.reshape(sigma, ())
