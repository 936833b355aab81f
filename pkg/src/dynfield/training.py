"""Optimization: Adam, the two-stage base training loop, and per-clip
fine-tuning.

Base training runs a coarse stage (no warping, nearest-neighbor feature
lookups, pixel loss only) and then a joint stage (warped bilinear lookups,
pixel loss plus the weighted offset regularizer). Fine-tuning adapts a
trained model to a single held-out clip, updating every parameter group,
with the clip's first ``n_references`` frames fixed as references.

Every stochastic choice (scene, target frame, references, ray pixels,
depth jitter) is drawn from one generator seeded by the config, in a fixed
per-step order, so a run is reproducible bit for bit. Training logs are
line-delimited JSON records; checkpoints go through
:mod:`dynfield.dataio`.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass

import numpy as np

from dynfield import dataio
from dynfield import diffmath as dm
from dynfield import geometry, renderer
from dynfield.conditioning import ConditionTrack
from dynfield.dataio import Scene
from dynfield.diffmath import DTensor, NumericalError, Tape
from dynfield.model import ModelConfig, ModelState, ReferenceFrame, ReferenceSet
from dynfield.model import render_rays
from dynfield.warpfield import offset_regularizer


@dataclass
class TrainConfig:
    coarse_iters: int = 3000
    joint_iters: int = 2000
    finetune_iters: int = 1000
    lr_initial: float = 5e-4
    lr_final: float = 5e-5
    lam: float = renderer.DEFAULT_LAMBDA
    rays_per_batch: int = 128
    n_samples: int = 64
    n_references: int = 4
    seed: int = 0
    profile: str = "train"
    log_every: int = 100
    train_warp: bool = True

    def __post_init__(self):
        if min(self.coarse_iters, self.joint_iters, self.finetune_iters) < 0:
            raise ValueError("iteration counts must be nonnegative")
        if not (0 < self.lr_final <= self.lr_initial):
            raise ValueError(f"need 0 < lr_final <= lr_initial, got "
                             f"{self.lr_final} and {self.lr_initial}")
        if self.lam < 0:
            raise ValueError(f"regularizer weight must be nonnegative, got {self.lam}")
        if self.rays_per_batch < 1 or self.n_samples < 2 or self.n_references < 1:
            raise ValueError("need rays_per_batch >= 1, n_samples >= 2, "
                             "n_references >= 1")
        if self.profile not in ("train", "test"):
            raise ValueError(f"unknown numeric profile {self.profile!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def learning_rate(cfg: TrainConfig, step: int, total: int) -> float:
    """Exponential decay from lr_initial to lr_final over ``total`` steps.

    ``step`` is 1-based; the final step lands exactly on lr_final.
    """
    if total <= 1:
        return cfg.lr_initial
    frac = (step - 1) / (total - 1)
    return float(cfg.lr_initial * (cfg.lr_final / cfg.lr_initial) ** frac)


class Adam(object):
    """Adam with bias correction; moments keyed by parameter name.

    Parameters are updated in sorted-name order. A missing or None gradient
    counts as zero (moments still decay).
    """

    def __init__(self, params: dict[str, DTensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self, lr: float) -> None:
        """Apply one update from the ``.grad`` fields, then clear them."""
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif g.shape != p.data.shape:
                raise dm.ShapeError(f"gradient for {name!r} has shape {g.shape}, "
                                    f"parameter has {p.data.shape}")
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.assign_(p.data - lr * update)
            p.grad = None

    def moment_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out


# --------------------------------------------------------------------------
# checkpoint glue


def save_model_checkpoint(path: str, model: ModelState, optimizer: Adam | None,
                          rng: np.random.Generator | None,
                          train_cfg: TrainConfig | None) -> None:
    tensors: dict[str, np.ndarray] = {n: p.data for n, p in model.all_params().items()}
    if optimizer is not None:
        tensors.update(optimizer.moment_tensors())
    meta = {
        "profile": dm.get_profile(),
        "model_config": model.cfg.to_dict(),
        "stage": model.stage,
        "opt_step": optimizer.step_count if optimizer else 0,
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "train_config": train_cfg.to_dict() if train_cfg else None,
    }
    dataio.save_checkpoint(path, tensors, meta)


def load_model_checkpoint(path: str) -> tuple[ModelState, dict[str, np.ndarray], dict]:
    """Rebuild a model from a checkpoint; sets the numeric profile it was
    saved under. Returns (model, raw tensor table, metadata)."""
    tensors, meta = dataio.load_checkpoint(path)
    dm.set_profile(meta["profile"])
    cfg = ModelConfig.from_dict(meta["model_config"])
    model = ModelState(cfg, seed=0, stage=meta["stage"])
    for name, p in model.all_params().items():
        if name not in tensors:
            raise dataio.DataError("corrupt_table",
                                   f"checkpoint is missing tensor {name!r}")
        if tensors[name].dtype != p.data.dtype:
            raise dataio.DataError("corrupt_table",
                                   f"tensor {name!r}: stored dtype {tensors[name].dtype} "
                                   f"does not match profile {meta['profile']!r}")
        p.assign_(tensors[name])
    return model, tensors, meta


# --------------------------------------------------------------------------
# batch assembly


def _draw_batch(scene: Scene, t: int, ref_ids: np.ndarray, cfg: TrainConfig,
                rng: np.random.Generator):
    """Rays, depths, targets, and references for one step."""
    frame = scene.frames[t]
    h, w = frame.height, frame.width
    flat = rng.integers(0, h * w, size=cfg.rays_per_batch)
    pixels = np.stack([flat % w, flat // w], axis=1)
    origins, dirs = geometry.generate_rays_batch(frame.intrinsics, frame.pose, pixels)
    depths = geometry.sample_depths(scene.z_near, scene.z_far, cfg.n_samples,
                                    cfg.rays_per_batch, jitter=True, rng=rng)
    target = frame.image[pixels[:, 1], pixels[:, 0]]
    background = frame.background[pixels[:, 1], pixels[:, 0]]
    refs = ReferenceSet([
        ReferenceFrame(image=scene.frames[j].image,
                       intrinsics=scene.frames[j].intrinsics,
                       pose=scene.frames[j].pose, frame_id=int(j))
        for j in ref_ids])
    return pixels, origins, dirs, depths, target, background, refs


def _train_step(model: ModelState, scene: Scene, t: int, ref_ids: np.ndarray,
                cfg: TrainConfig, rng: np.random.Generator, optimizer: Adam,
                lr: float, lam: float) -> renderer.LossReport:
    pixels, origins, dirs, depths, target, background, refs = _draw_batch(
        scene, t, ref_ids, cfg, rng)
    try:
        with Tape() as tape:
            condition = model.condition_at(scene.track, t)
            rendered, offsets, alphas = render_rays(model, origins, dirs, depths,
                                                    background, refs, condition)
            l_mse = renderer.mse_loss(rendered, target)
            l_reg = offset_regularizer(offsets, alphas) if offsets else None
            report = renderer.total_loss(l_mse, l_reg, lam=lam)
            tape.backward(report.total_tensor)
    except NumericalError as exc:
        detail = {
            "scene_id": scene.scene_id,
            "target_frame": int(t),
            "reference_frames": [int(j) for j in ref_ids],
            "pixels": pixels[:16].tolist(),
            "error": str(exc),
        }
        raise NumericalError(
            f"non-finite loss; offending batch: {json.dumps(detail)}") from exc
    optimizer.step(lr)
    return report


def _log_record(records: list, stream, iteration: int, stage: str,
                report: renderer.LossReport, wall_ms: float) -> None:
    rec = {"iteration": iteration, "stage": stage, "l_mse": report.l_mse,
           "l_reg": report.l_reg, "total": report.total,
           "wall_ms": round(wall_ms, 3)}
    records.append(rec)
    if stream is not None:
        stream.write(json.dumps(rec) + "\n")
        stream.flush()


def _validate_dataset(scenes: list[Scene], cfg: TrainConfig,
                      min_scenes: int) -> None:
    if len(scenes) < min_scenes:
        raise ValueError(f"need at least {min_scenes} scene(s), got {len(scenes)}")
    d_a = scenes[0].track.dim
    for scene in scenes:
        if scene.track.dim != d_a:
            raise ValueError(f"scene {scene.scene_id!r} has condition dim "
                             f"{scene.track.dim}, expected {d_a}")
        if len(scene) < cfg.n_references + 1:
            raise ValueError(
                f"scene {scene.scene_id!r} has {len(scene)} frames; "
                f"{cfg.n_references} references plus a distinct target need "
                f"at least {cfg.n_references + 1}")


def _optimizer_params(model: ModelState, cfg: TrainConfig) -> dict[str, DTensor]:
    params = model.params()
    if not cfg.train_warp:
        params = {n: p for n, p in params.items() if not n.startswith("warp.")}
    return params


def train_base(scenes: list[Scene], cfg: TrainConfig,
               model_cfg: ModelConfig | None = None, out_dir: str | None = None,
               log_stream=None) -> tuple[ModelState, list[dict]]:
    """Run the coarse-then-joint schedule over a multi-scene corpus.

    Returns the trained model and the list of log records. When ``out_dir``
    is given, writes ``coarse.ckpt`` at the stage boundary, ``base.ckpt`` at
    the end, and ``train_log.jsonl`` alongside them.
    """
    _validate_dataset(scenes, cfg, min_scenes=2)
    dm.set_profile(cfg.profile)
    if model_cfg is None:
        model_cfg = ModelConfig(condition_dim=scenes[0].track.dim)
    elif model_cfg.condition_dim != scenes[0].track.dim:
        raise ValueError(f"model condition_dim {model_cfg.condition_dim} does not "
                         f"match dataset d_a {scenes[0].track.dim}")

    rng = np.random.default_rng(cfg.seed)
    model = ModelState(model_cfg, seed=cfg.seed, stage="coarse")
    optimizer = Adam(_optimizer_params(model, cfg))
    records: list[dict] = []
    own_stream = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        if log_stream is None:
            own_stream = open(os.path.join(out_dir, "train_log.jsonl"), "w")
            log_stream = own_stream

    total = cfg.coarse_iters + cfg.joint_iters
    try:
        for i in range(1, total + 1):
            if i == cfg.coarse_iters + 1:
                model.stage = "joint"
                optimizer = Adam(_optimizer_params(model, cfg))
                if out_dir is not None:
                    save_model_checkpoint(os.path.join(out_dir, "coarse.ckpt"),
                                          model, optimizer, rng, cfg)
            stage = model.stage
            scene = scenes[int(rng.integers(len(scenes)))]
            t = int(rng.integers(len(scene)))
            candidates = np.delete(np.arange(len(scene)), t)
            ref_ids = rng.choice(candidates, size=cfg.n_references, replace=False)
            lam = cfg.lam if stage == "joint" else 0.0
            started = time.perf_counter()
            report = _train_step(model, scene, t, ref_ids, cfg, rng, optimizer,
                                 learning_rate(cfg, i, total), lam)
            if i % cfg.log_every == 0 or i == 1 or i == total:
                _log_record(records, log_stream, i, stage, report,
                            (time.perf_counter() - started) * 1e3)
        if out_dir is not None:
            save_model_checkpoint(os.path.join(out_dir, "base.ckpt"),
                                  model, optimizer, rng, cfg)
    finally:
        if own_stream is not None:
            own_stream.close()
    return model, records


def finetune(base: str | ModelState, clip: Scene, cfg: TrainConfig,
             out_dir: str | None = None, log_stream=None
             ) -> tuple[ModelState, list[dict]]:
    """Adapt a base model to one clip; the base is not modified.

    A checkpoint path is loaded fresh; a live ModelState is copied, so the
    caller's model keeps its pre-fine-tuning weights. References are the
    clip's first ``n_references`` frames. All parameter groups update. With
    ``finetune_iters == 0`` the returned model renders identically to the
    base.
    """
    _validate_dataset([clip], cfg, min_scenes=1)
    if isinstance(base, str):
        model, _, _ = load_model_checkpoint(base)
        dm.set_profile(cfg.profile)
    else:
        dm.set_profile(cfg.profile)
        model = ModelState(base.cfg, seed=0, stage="joint")
        source = base.all_params()
        for name, p in model.all_params().items():
            p.assign_(source[name].data.copy())
    model.stage = "joint"
    if model.cfg.condition_dim != clip.track.dim:
        raise ValueError(f"model condition_dim {model.cfg.condition_dim} does not "
                         f"match clip d_a {clip.track.dim}")

    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam(_optimizer_params(model, cfg))
    ref_ids = np.arange(cfg.n_references)
    records: list[dict] = []
    own_stream = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        if log_stream is None:
            own_stream = open(os.path.join(out_dir, "finetune_log.jsonl"), "w")
            log_stream = own_stream

    try:
        for i in range(1, cfg.finetune_iters + 1):
            t = int(rng.integers(len(clip)))
            started = time.perf_counter()
            report = _train_step(model, clip, t, ref_ids, cfg, rng, optimizer,
                                 learning_rate(cfg, i, cfg.finetune_iters), cfg.lam)
            if i % cfg.log_every == 0 or i == 1 or i == cfg.finetune_iters:
                _log_record(records, log_stream, i, "finetune", report,
                            (time.perf_counter() - started) * 1e3)
        if out_dir is not None:
            save_model_checkpoint(os.path.join(out_dir, "finetuned.ckpt"),
                                  model, optimizer, rng, cfg)
    finally:
        if own_stream is not None:
            own_stream.close()
    return model, records


# --------------------------------------------------------------------------
# evaluation helpers


def clip_references(model: ModelState, clip: Scene, n_references: int
                    ) -> ReferenceSet:
    """Inference-time references: the clip's first frames, deterministic."""
    ids = range(min(n_references, len(clip)))
    return ReferenceSet([
        ReferenceFrame(image=clip.frames[j].image,
                       intrinsics=clip.frames[j].intrinsics,
                       pose=clip.frames[j].pose, frame_id=j)
        for j in ids])


def evaluate_frames(model: ModelState, clip: Scene, frame_ids: list[int],
                    cfg: TrainConfig, refs: ReferenceSet | None = None,
                    conditions: np.ndarray | None = None) -> list[dict]:
    """Render frames and score them against ground truth.

    ``conditions`` overrides the clip's own track (cross-driving): it is a
    (len(frame_ids), d_a) array of raw vectors, temporally filtered as a
    track of its own, indexed by position in ``frame_ids``.
    """
    if refs is None:
        refs = clip_references(model, clip, cfg.n_references)
    # feature maps cached on a shared ReferenceSet may belong to another
    # model's encoder; drop them so this model extracts its own
    refs.feature_maps = None
    if conditions is None:
        track, by_position = clip.track, False
    else:
        track, by_position = ConditionTrack(np.asarray(conditions)), True
    rows = []
    for pos, t in enumerate(frame_ids):
        condition = model.condition_at(track, pos if by_position else t)
        frame = clip.frames[t]
        image = renderer.render_frame(model, frame, refs, condition, cfg.n_samples)
        rows.append({
            "frame": int(t),
            "psnr": dataio.psnr(image, frame.image),
            "ssim": dataio.ssim(image, frame.image),
            "mse": float(np.mean((image - frame.image) ** 2)),
            "image": image,
        })
    return rows
