"""Model assembly: all learned submodules plus the staged ray forward.

A ModelState bundles the temporal condition filter, the reference feature
extractor, the attention aggregator, the radiance field, and the warp
module, all created from one seeded generator in a fixed order so that a
seed pins every initial weight.

The forward pass over a ray batch has two stages. In the coarse stage the
reference features at each sample point's projection are fetched with
nearest lookup and the warp module is neither evaluated nor trained. In the
joint stage the warp module turns the nearest-sampled feature into a 2D
offset per (point, reference), and the aggregated feature is re-sampled
bilinearly at the shifted projection, which makes the sampling coordinates
themselves differentiable.

Projections arrive in pixel-center convention (the center of pixel i is at
continuous coordinate i + 0.5) while the feature grids interpolate in node
index space (grid node i at coordinate i); the forward subtracts 0.5 when
moving from one to the other, so a ray through a pixel center samples that
pixel's feature exactly.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np

from dynfield import conditioning as cond
from dynfield import diffmath as dm
from dynfield import geometry, radiance, renderer, warpfield
from dynfield.diffmath import DTensor

STAGES = ("coarse", "joint")
INVALID_SCORE = -1e9


@dataclass
class ModelConfig:
    condition_dim: int = 32
    window: int = 9
    feature_dim: int = 128
    attn_hidden: int = 64
    field_depth: int = 4
    field_width: int = 128
    field_skip: int = 3
    warp_hidden: int = 128
    l_pos: int = 10
    l_dir: int = 4
    world_scale: float = 1.0

    @classmethod
    def paper_profile(cls, **overrides) -> "ModelConfig":
        return cls(field_depth=8, field_width=256, field_skip=5, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ReferenceFrame:
    image: np.ndarray          # (H, W, 3) in [0, 1]
    intrinsics: geometry.Intrinsics
    pose: geometry.Pose
    frame_id: int


class ReferenceSet:
    """The N reference frames conditioning a render, plus their feature maps."""

    def __init__(self, frames: list[ReferenceFrame]):
        if not frames:
            raise ValueError("a reference set needs at least one frame")
        self.frames = frames
        self.feature_maps: list[cond.FeatureMap] | None = None

    def __len__(self) -> int:
        return len(self.frames)

    def extract(self, encoder: cond.FeatureExtractor) -> None:
        """(Re)extract feature maps; must be called inside the training tape."""
        self.feature_maps = [encoder(f.image, f.frame_id) for f in self.frames]


class ModelState:
    def __init__(self, cfg: ModelConfig, seed: int = 0, stage: str = "coarse"):
        if stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {stage!r}")
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.stage = stage
        # fixed construction order: the seed pins every submodule's init
        self.tfilt = cond.TemporalFilter(cfg.condition_dim, cfg.window,
                                         cfg.attn_hidden, rng=rng)
        self.enc = cond.FeatureExtractor(out=cfg.feature_dim, rng=rng)
        self.agg = cond.Aggregator(cfg.feature_dim, cfg.attn_hidden, rng=rng)
        field_cfg = radiance.FieldConfig(
            trunk_depth=cfg.field_depth, trunk_width=cfg.field_width,
            skip_at=cfg.field_skip, condition_dim=cfg.condition_dim,
            feature_dim=cfg.feature_dim, l_pos=cfg.l_pos, l_dir=cfg.l_dir)
        self.field = radiance.RadianceField(field_cfg, rng=rng)
        warp_cfg = warpfield.WarpConfig(hidden=cfg.warp_hidden,
                                        condition_dim=cfg.condition_dim,
                                        feature_dim=cfg.feature_dim, l_pos=cfg.l_pos)
        self.warp = warpfield.WarpModule(warp_cfg, rng=rng)

    def submodules(self) -> dict[str, dict[str, DTensor]]:
        return {"tfilt": self.tfilt.p, "enc": self.enc.p, "agg": self.agg.p,
                "field": self.field.p, "warp": self.warp.p}

    def params(self, stage: str | None = None) -> dict[str, DTensor]:
        """Flat name -> tensor map; the coarse stage excludes the warp module."""
        stage = stage or self.stage
        out: dict[str, DTensor] = {}
        for prefix, sub in self.submodules().items():
            if stage == "coarse" and prefix == "warp":
                continue
            for name, tensor in sub.items():
                out[f"{prefix}.{name}"] = tensor
        return out

    def all_params(self) -> dict[str, DTensor]:
        return self.params(stage="joint")

    def condition_at(self, track: cond.ConditionTrack, t: int) -> DTensor:
        return self.tfilt(track, t)


def params_digest(params: dict[str, DTensor]) -> str:
    """Order-independent content hash of a parameter dict."""
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        arr = params[name].data
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def render_rays(model: ModelState, origins: np.ndarray, dirs: np.ndarray,
                depths: np.ndarray, background: np.ndarray, refs: ReferenceSet,
                condition: DTensor
                ) -> tuple[DTensor, list[DTensor], np.ndarray]:
    """Forward a ray batch through the full model.

    ``origins``/``dirs`` are (R, 3), ``depths`` (R, S) strictly increasing
    per ray, ``background`` (R, 3). Returns the rendered (R, 3) colors, the
    per-reference offset tensors (empty in the coarse stage), and the
    detached per-point opacities aligned with those offsets.
    """
    n_rays, n_samples = depths.shape
    if n_samples < 2:
        raise ValueError(f"need at least 2 samples per ray, got {n_samples}")
    if not np.all(np.diff(depths, axis=1) > 0):
        raise ValueError("sample depths must be strictly increasing along each ray")
    if refs.feature_maps is None:
        refs.extract(model.enc)

    n_field = n_samples - 1
    dt = dm.float_dtype()
    # world-space sample points for all but the terminal background sample
    pts = origins[:, None, :] + depths[:, :n_field, None] * dirs[:, None, :]
    pts_flat = pts.reshape(-1, 3)
    dirs_flat = np.repeat(dirs, n_field, axis=0)
    deltas = np.diff(depths, axis=1)

    pts_t = DTensor(np.asarray(pts_flat / model.cfg.world_scale, dt))
    dirs_t = DTensor(np.asarray(dirs_flat, dt))

    per_ref: list[DTensor] = []
    offsets: list[DTensor] = []
    score_bias = np.zeros((pts_flat.shape[0], len(refs)), dtype=dt)
    for n, (frame, fmap) in enumerate(zip(refs.frames, refs.feature_maps)):
        uv, _, valid = geometry.project_points(pts_flat, frame.intrinsics, frame.pose)
        score_bias[~valid, n] = INVALID_SCORE
        # pixel-center convention -> grid node index space
        u_idx = np.asarray(uv[:, 0] - 0.5, dt)
        v_idx = np.asarray(uv[:, 1] - 0.5, dt)
        f_near = cond.sample_features(fmap, u_idx, v_idx, "nearest")
        if model.stage == "coarse":
            per_ref.append(f_near)
            continue
        off = model.warp(pts_t, condition, f_near)
        offsets.append(off)
        du = dm.reshape(dm.slice_axis(off, 1, 0, 1), (off.shape[0],))
        dv = dm.reshape(dm.slice_axis(off, 1, 1, 2), (off.shape[0],))
        u_w = dm.add(DTensor(u_idx), du)
        v_w = dm.add(DTensor(v_idx), dv)
        per_ref.append(cond.sample_features(fmap, u_w, v_w, "bilinear"))

    bias = score_bias if (score_bias != 0).any() else None
    fused = model.agg.fuse_pointwise(per_ref, score_bias=bias)
    color, sigma = model.field(pts_t, dirs_t, condition, fused)
    rendered, _ = renderer.composite_rays(sigma, color, deltas, background)
    alphas = renderer.point_alphas(sigma.data, deltas)
    return rendered, offsets, alphas


# ---------------------------------------------------------------- grad suite


def _tiny_setup(rng: np.random.Generator):
    """Miniature joint-stage model, references, and ray batch for checking."""
    cfg = ModelConfig(condition_dim=4, window=3, feature_dim=6, attn_hidden=8,
                      field_depth=3, field_width=16, field_skip=2,
                      warp_hidden=12, l_pos=2, l_dir=1, world_scale=2.0)
    model = ModelState(cfg, seed=11, stage="joint")
    model.warp.p["l2.w"].assign_(0.05 * rng.standard_normal(model.warp.p["l2.w"].shape))

    cam = geometry.Intrinsics(fx=7.0, fy=7.0, cx=3.17, cy=3.29)
    frames = []
    for i in range(2):
        angle = 0.25 * (i - 0.5)
        c, s = np.cos(angle), np.sin(angle)
        rot = np.array([[c, 0, -s], [0, 1, 0], [s, 0, c]])
        center = rot.T @ np.array([0.0, 0.0, -2.0])
        frames.append(ReferenceFrame(
            image=rng.uniform(0, 1, size=(7, 7, 3)),
            intrinsics=cam, pose=geometry.Pose(rot, -rot @ center), frame_id=i))
    refs = ReferenceSet(frames)

    track = cond.ConditionTrack(rng.standard_normal((5, 4)))
    pixels = np.array([[2, 3], [4, 2], [3, 4]])
    origins, dirs = geometry.generate_rays_batch(cam, frames[0].pose, pixels)
    depths = geometry.sample_depths(1.6, 2.4, 4, len(pixels))
    background = rng.uniform(0, 1, size=(len(pixels), 3))
    target = rng.uniform(0, 1, size=(len(pixels), 3))
    return model, refs, track, origins, dirs, depths, background, target


def renderer_grad_suite(rng: np.random.Generator) -> dict[str, float]:
    """Finite-difference check of the full pixel loss against every parameter."""
    from dynfield.gradsuites import check_all_params

    model, refs, track, origins, dirs, depths, background, target = _tiny_setup(rng)

    def fwd():
        refs.extract(model.enc)
        a = model.condition_at(track, 2)
        rendered, offsets, alphas = render_rays(model, origins, dirs, depths,
                                                background, refs, a)
        l_mse = renderer.mse_loss(rendered, target)
        l_reg = warpfield.offset_regularizer(offsets, alphas)
        return renderer.total_loss(l_mse, l_reg, lam=1e-3).total_tensor

    out: dict[str, float] = {}
    for prefix, sub in model.submodules().items():
        for name, err in check_all_params(fwd, sub).items():
            out[f"{prefix}.{name}"] = err
    return out
