"""Dataset generation and IO: synthetic deformable scenes, the scene
manifest format, binary checkpoints, PNG handling, and image metrics.

Scene directory layout::

    <scene>/manifest              UTF-8 JSON document
    <scene>/frames/%05d.png       8-bit RGB frames
    <scene>/backgrounds/%05d.png  8-bit RGB backgrounds

The synthetic generator stands in for captured video: it ray-traces (by
signed-distance sphere tracing, independent of the neural field) a diffuse
sphere whose mouth-like notch opens with a scalar signal s_t, emitted as
channel 0 of the per-frame condition vector alongside sinusoidal distractor
channels, while the camera orbits the object over a constant background.

Checkpoints are an owned binary format: magic ``DFRF``, little-endian
uint32 version (currently 1), a JSON metadata block (numeric profile,
config snapshot, stage, rng state, optimizer step), then a name-length-
prefixed tensor table of little-endian float32/float64 arrays. Loading is
bit-exact with respect to saving.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from dynfield import geometry
from dynfield.conditioning import ConditionTrack
from dynfield.diffmath import DTensor

CHECKPOINT_MAGIC = b"DFRF"
CHECKPOINT_VERSION = 1
PSNR_CAP = 99.0

_DTYPE_CODES = {np.dtype("float32"): 4, np.dtype("float64"): 8}
_CODE_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class DataError(Exception):
    """IO/format failure with a machine-readable code.

    Codes: missing_file, bad_magic, version_mismatch, corrupt_table,
    malformed_pose, malformed_manifest.
    """

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# PNG handling


def write_png(path: str, image: np.ndarray) -> None:
    """Write an (H, W, 3) float image in [0, 1] as 8-bit RGB, rounding half-up."""
    quantized = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    tmp = path + ".tmp"
    Image.fromarray(quantized, mode="RGB").save(tmp, format="PNG")
    os.replace(tmp, path)


def read_png(path: str) -> np.ndarray:
    """Read an 8-bit RGB PNG to (H, W, 3) float64 in [0, 1] (v / 255)."""
    if not os.path.exists(path):
        raise DataError("missing_file", f"image not found: {path}")
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


# --------------------------------------------------------------------------
# scenes


@dataclass
class FrameRecord:
    """One frame plus everything needed to shoot rays through it."""

    image: np.ndarray
    background: np.ndarray
    intrinsics: geometry.Intrinsics
    pose: geometry.Pose
    frame_id: int
    z_near: float
    z_far: float

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass
class Scene:
    scene_id: str
    frames: list[FrameRecord]
    track: ConditionTrack
    z_near: float
    z_far: float
    world_scale: float

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def height(self) -> int:
        return self.frames[0].height

    @property
    def width(self) -> int:
        return self.frames[0].width

    def subset(self, indices) -> "Scene":
        """A clip view over selected frames (shares image arrays)."""
        indices = list(indices)
        frames = [self.frames[i] for i in indices]
        track = ConditionTrack(self.track.values[indices])
        return Scene(self.scene_id, frames, track, self.z_near, self.z_far,
                     self.world_scale)


def save_scene(path: str, scene_id: str, images: list[np.ndarray],
               backgrounds: list[np.ndarray], intrinsics: list[geometry.Intrinsics],
               poses: list[geometry.Pose], conditions: np.ndarray,
               z_near: float, z_far: float, world_scale: float) -> None:
    os.makedirs(os.path.join(path, "frames"), exist_ok=True)
    os.makedirs(os.path.join(path, "backgrounds"), exist_ok=True)
    frames_meta = []
    for i, (img, bg, k, pose) in enumerate(zip(images, backgrounds, intrinsics, poses)):
        rel_img = f"frames/{i:05d}.png"
        rel_bg = f"backgrounds/{i:05d}.png"
        write_png(os.path.join(path, rel_img), img)
        write_png(os.path.join(path, rel_bg), bg)
        k_mat = [[k.fx, 0.0, k.cx], [0.0, k.fy, k.cy], [0.0, 0.0, 1.0]]
        rt = np.concatenate([pose.R, pose.T[:, None]], axis=1)
        frames_meta.append({
            "image": rel_img,
            "background": rel_bg,
            "K": k_mat,
            "RT": rt.tolist(),
            "condition": [float(x) for x in conditions[i]],
        })
    manifest = {
        "scene_id": scene_id,
        "height": int(images[0].shape[0]),
        "width": int(images[0].shape[1]),
        "d_a": int(conditions.shape[1]),
        "z_near": float(z_near),
        "z_far": float(z_far),
        "world_scale": float(world_scale),
        "frames": frames_meta,
    }
    tmp = os.path.join(path, "manifest.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    os.replace(tmp, os.path.join(path, "manifest"))


def load_scene(path: str) -> Scene:
    """Load and validate a scene directory."""
    man_path = os.path.join(path, "manifest")
    if not os.path.exists(man_path):
        raise DataError("missing_file", f"manifest not found: {man_path}")
    try:
        with open(man_path, encoding="utf-8") as fh:
            man = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataError("malformed_manifest", f"manifest is not valid JSON: {exc}") from exc
    for key in ("scene_id", "height", "width", "d_a", "z_near", "z_far",
                "world_scale", "frames"):
        if key not in man:
            raise DataError("malformed_manifest", f"manifest missing key {key!r}")
    if not man["frames"]:
        raise DataError("malformed_manifest", "manifest lists no frames")

    d_a = man["d_a"]
    frames: list[FrameRecord] = []
    conditions = []
    for i, fr in enumerate(man["frames"]):
        k_mat = np.asarray(fr["K"], dtype=np.float64)
        if k_mat.shape != (3, 3):
            raise DataError("malformed_manifest", f"frame {i}: K must be 3x3")
        rt = np.asarray(fr["RT"], dtype=np.float64)
        if rt.shape != (3, 4):
            raise DataError("malformed_pose", f"frame {i}: [R|T] must be 3x4")
        try:
            pose = geometry.Pose(rt[:, :3], rt[:, 3])
        except ValueError as exc:
            raise DataError("malformed_pose", f"frame {i}: {exc}") from exc
        cond = np.asarray(fr["condition"], dtype=np.float64)
        if cond.shape != (d_a,):
            raise DataError("malformed_manifest",
                            f"frame {i}: condition has {cond.shape[0]} values, "
                            f"manifest says d_a={d_a}")
        image = read_png(os.path.join(path, fr["image"]))
        background = read_png(os.path.join(path, fr["background"]))
        if image.shape != (man["height"], man["width"], 3):
            raise DataError("malformed_manifest",
                            f"frame {i}: image shape {image.shape} != manifest size")
        if background.shape != image.shape:
            raise DataError("malformed_manifest",
                            f"frame {i}: background shape {background.shape} mismatch")
        intr = geometry.Intrinsics(fx=k_mat[0, 0], fy=k_mat[1, 1],
                                   cx=k_mat[0, 2], cy=k_mat[1, 2])
        frames.append(FrameRecord(image=image, background=background,
                                  intrinsics=intr, pose=pose, frame_id=i,
                                  z_near=man["z_near"], z_far=man["z_far"]))
        conditions.append(cond)

    return Scene(scene_id=man["scene_id"], frames=frames,
                 track=ConditionTrack(np.stack(conditions)),
                 z_near=man["z_near"], z_far=man["z_far"],
                 world_scale=man["world_scale"])


# --------------------------------------------------------------------------
# synthetic scene generator


def _scene_sdf(pts: np.ndarray, mouth_radius: float) -> np.ndarray:
    """Signed distance to a unit-ish sphere with a front notch carved out."""
    main = np.linalg.norm(pts, axis=-1) - 0.5
    mouth_center = np.array([0.0, -0.12, 0.45])
    bite = np.linalg.norm(pts - mouth_center, axis=-1) - mouth_radius
    return np.maximum(main, -bite)


def _sdf_normal(pts: np.ndarray, mouth_radius: float, h: float = 1e-5) -> np.ndarray:
    n = np.zeros_like(pts)
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = h
        n[:, axis] = (_scene_sdf(pts + e, mouth_radius)
                      - _scene_sdf(pts - e, mouth_radius))
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.maximum(norm, 1e-12)


def _shade(pts: np.ndarray, normals: np.ndarray, albedo_phase: np.ndarray) -> np.ndarray:
    light = np.array([0.45, 0.6, -0.66])
    light = light / np.linalg.norm(light)
    lambert = np.clip(normals @ light, 0.0, None)
    albedo = 0.55 + 0.35 * np.sin(3.1 * pts + albedo_phase)
    shade = (0.25 + 0.75 * lambert)[:, None]
    return np.clip(albedo * shade, 0.0, 1.0)


def _orbit_pose(angle: float, elevation: float, distance: float) -> geometry.Pose:
    """Camera on a sphere around the origin, optical axis through the origin."""
    ce, se = np.cos(elevation), np.sin(elevation)
    ca, sa = np.cos(angle), np.sin(angle)
    center = distance * np.array([ca * ce, se, -sa * ce])
    forward = -center / np.linalg.norm(center)          # toward origin
    up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    r_mat = np.stack([right, down, forward])            # world -> camera rows
    return geometry.Pose(r_mat, -r_mat @ center)


def generate_synthetic_scene(path: str, seed: int, n_frames: int, resolution: int,
                             deformation_amplitude: float, d_a: int = 32,
                             orbit_span_deg: float = 70.0) -> None:
    """Render and write a synthetic deformable-object scene.

    Deterministic in all arguments: the same call produces byte-identical
    output. ``deformation_amplitude`` scales how far the notch opens with
    the driving signal; 0 freezes the geometry. ``orbit_span_deg`` is the
    total camera azimuth sweep (0 keeps the camera fixed).
    """
    if resolution < 16:
        raise ValueError(f"resolution must be at least 16, got {resolution}")
    rng = np.random.default_rng(seed)
    h = w = resolution
    distance = 2.4
    z_near, z_far = distance - 0.7, distance + 0.7
    intr = geometry.Intrinsics(fx=1.6 * w, fy=1.6 * w, cx=w / 2.0, cy=h / 2.0)

    background_color = 0.25 + 0.5 * rng.random(3)
    albedo_phase = rng.uniform(0, 2 * np.pi, size=3)
    drive_freq = rng.uniform(1.5, 3.0)
    drive_phase = rng.uniform(0, 2 * np.pi)

    t_axis = np.arange(n_frames) / max(n_frames - 1, 1)
    s_t = 0.5 + 0.5 * np.sin(2 * np.pi * drive_freq * t_axis + drive_phase)
    conditions = np.zeros((n_frames, d_a))
    conditions[:, 0] = s_t
    dist_freq = rng.uniform(0.5, 4.0, size=d_a - 1)
    dist_phase = rng.uniform(0, 2 * np.pi, size=d_a - 1)
    dist_amp = rng.uniform(0.3, 1.0, size=d_a - 1)
    conditions[:, 1:] = dist_amp * np.sin(
        2 * np.pi * dist_freq * t_axis[:, None] + dist_phase)

    background = np.broadcast_to(background_color, (h, w, 3)).copy()
    span = np.deg2rad(orbit_span_deg)
    angles = (np.linspace(-span / 2, span / 2, n_frames) if n_frames > 1
              else np.zeros(1))

    images, poses, intrinsics = [], [], []
    pixels = np.stack(np.meshgrid(np.arange(w), np.arange(h)), axis=-1).reshape(-1, 2)
    for t in range(n_frames):
        mouth_radius = 0.06 + 0.3 * deformation_amplitude * s_t[t]
        pose = _orbit_pose(angles[t], np.deg2rad(12.0), distance)
        origins, dirs = geometry.generate_rays_batch(intr, pose, pixels)

        # sphere tracing from the near bound
        depth = np.full(h * w, z_near)
        alive = np.ones(h * w, dtype=bool)
        for _ in range(96):
            if not alive.any():
                break
            pts = origins[alive] + depth[alive, None] * dirs[alive]
            d_sdf = _scene_sdf(pts, mouth_radius)
            depth[alive] += d_sdf
            still = (d_sdf > 1e-5) & (depth[alive] < z_far)
            alive[np.where(alive)[0][~still]] = False
        hit = depth < z_far

        frame = background.reshape(-1, 3).copy()
        if hit.any():
            pts = origins[hit] + depth[hit, None] * dirs[hit]
            normals = _sdf_normal(pts, mouth_radius)
            frame[hit] = _shade(pts, normals, albedo_phase)
        images.append(frame.reshape(h, w, 3))
        poses.append(pose)
        intrinsics.append(intr)

    backgrounds = [background] * n_frames
    save_scene(path, scene_id=f"synthetic-{seed}", images=images,
               backgrounds=backgrounds, intrinsics=intrinsics, poses=poses,
               conditions=conditions, z_near=z_near, z_far=z_far, world_scale=1.0)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str, tensors: dict[str, DTensor | np.ndarray],
                    meta: dict) -> None:
    """Write the binary checkpoint atomically (temp file + rename)."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta_blob)))
    buf.write(meta_blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = tensors[name]
        if isinstance(arr, DTensor):
            arr = arr.data
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise ValueError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        little = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        buf.write(little.tobytes())

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".ckpt.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise DataError("corrupt_table",
                            f"checkpoint truncated at byte {self.pos} "
                            f"(needed {n} more)")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint -> (tensor table, metadata). Bit-exact."""
    if not os.path.exists(path):
        raise DataError("missing_file", f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise DataError("bad_magic", f"{path} is not a checkpoint "
                        f"(expected magic {CHECKPOINT_MAGIC!r})")
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise DataError("version_mismatch",
                        f"checkpoint version {version}, supported {CHECKPOINT_VERSION}")
    meta_len = reader.u32()
    try:
        meta = json.loads(reader.take(meta_len).decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataError("corrupt_table", f"metadata block unreadable: {exc}") from exc

    tensors: dict[str, np.ndarray] = {}
    n_tensors = reader.u32()
    for _ in range(n_tensors):
        name = reader.take(reader.u16()).decode("utf-8")
        code = reader.u8()
        if code not in _CODE_DTYPES:
            raise DataError("corrupt_table", f"tensor {name!r}: unknown dtype code {code}")
        ndim = reader.u8()
        shape = tuple(reader.u32() for _ in range(ndim))
        dtype = _CODE_DTYPES[code]
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = reader.take(count * dtype.itemsize)
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    if reader.pos != len(reader.blob):
        raise DataError("corrupt_table",
                        f"{len(reader.blob) - reader.pos} trailing bytes after table")
    return tensors, meta


# --------------------------------------------------------------------------
# metrics


def psnr(img: np.ndarray, ref: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; capped at 99."""
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise ValueError(f"shape mismatch: {img.shape} vs {ref.shape}")
    mse = float(np.mean((img - ref) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def _windowed_mean(channel: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    size = kernel.shape[0]
    windows = sliding_window_view(channel, (size, size))
    return np.tensordot(windows, kernel, axes=([2, 3], [0, 1]))


def ssim(img: np.ndarray, ref: np.ndarray, k1: float = 0.01, k2: float = 0.03
         ) -> float:
    """Mean structural similarity over valid 11x11 Gaussian windows.

    Dynamic range fixed at 1; channels averaged. Images must be at least
    11 pixels on each side.
    """
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise ValueError(f"shape mismatch: {img.shape} vs {ref.shape}")
    if img.ndim == 2:
        img = img[:, :, None]
        ref = ref[:, :, None]
    if img.shape[0] < 11 or img.shape[1] < 11:
        raise ValueError(f"images must be at least 11x11, got {img.shape}")
    kernel = _gaussian_kernel()
    c1, c2 = k1 ** 2, k2 ** 2
    scores = []
    for ch in range(img.shape[2]):
        x, y = img[:, :, ch], ref[:, :, ch]
        mu_x = _windowed_mean(x, kernel)
        mu_y = _windowed_mean(y, kernel)
        xx = _windowed_mean(x * x, kernel) - mu_x ** 2
        yy = _windowed_mean(y * y, kernel) - mu_y ** 2
        xy = _windowed_mean(x * y, kernel) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))
