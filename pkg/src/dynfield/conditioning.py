"""Per-frame condition vectors and pixel-aligned reference features.

Three learned pieces live here:

* a temporal filter that fuses each frame's condition vector with its
  neighbors through additive self-attention over a fixed odd window,
* a two-layer convolutional extractor that turns a reference image into a
  full-resolution feature grid (3 -> 64 -> 128 channels, relu between),
* an attention aggregator that fuses per-reference feature vectors into a
  single vector via softmax over learned scores.

Both attention blocks score a vector x as w . tanh(W x + b), which keeps
their outputs inside the componentwise convex hull of their inputs.

Learned modules keep their tensors in a flat name-keyed dict ``p``; model
assembly prefixes those names, and swapping a single parameter (for
finite-difference checks) is a plain dict assignment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dynfield import diffmath as dm
from dynfield.diffmath import DTensor

FEATURE_DIM = 128
DEFAULT_CONDITION_DIM = 32
DEFAULT_WINDOW = 9
ATTN_HIDDEN = 64


@dataclass
class FeatureMap:
    """Full-resolution (H, W, D) feature grid extracted from one reference frame."""

    data: DTensor
    frame_id: int

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


class ConditionTrack:
    """A (T, d_a) sequence of raw per-frame condition vectors."""

    def __init__(self, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] == 0:
            raise ValueError(f"condition track must be a non-empty (T, d) array, got {values.shape}")
        self.values = values

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def window(self, t: int, size: int) -> np.ndarray:
        """(size, d) neighborhood centered at t, edges padded by repetition."""
        if size % 2 != 1:
            raise ValueError(f"window size must be odd, got {size}")
        half = size // 2
        idx = np.clip(np.arange(t - half, t + half + 1), 0, len(self) - 1)
        return self.values[idx]


def _param(rng: np.random.Generator, shape: tuple[int, ...], scale: float) -> DTensor:
    data = np.asarray(rng.standard_normal(shape) * scale, dm.float_dtype())
    return DTensor(data, requires_grad=True)


def _zeros(shape) -> DTensor:
    return DTensor(np.zeros(shape, dm.float_dtype()), requires_grad=True)


def _attention_scores(x: DTensor, p: dict[str, DTensor]) -> DTensor:
    """(N, d) -> (N, 1) additive-attention scores w . tanh(W x + b)."""
    h = dm.tanh(dm.add(dm.matmul(x, p["W"]), p["b"]))
    return dm.matmul(h, p["w"])


class TemporalFilter:
    """Self-attention fusion of a condition vector with its window neighbors."""

    def __init__(self, dim: int = DEFAULT_CONDITION_DIM, window: int = DEFAULT_WINDOW,
                 hidden: int = ATTN_HIDDEN, rng: np.random.Generator | None = None):
        if window % 2 != 1 or window < 1:
            raise ValueError(f"window must be odd and positive, got {window}")
        rng = rng or np.random.default_rng(0)
        self.dim = dim
        self.window = window
        self.p = {
            "W": _param(rng, (dim, hidden), 1.0 / np.sqrt(dim)),
            "b": _zeros(hidden),
            "w": _param(rng, (hidden, 1), 1.0 / np.sqrt(hidden)),
        }

    def __call__(self, track: ConditionTrack, t: int) -> DTensor:
        """Filtered condition vector for frame t, shape (d,)."""
        if track.dim != self.dim:
            raise dm.ShapeError(f"track dim {track.dim} != filter dim {self.dim}")
        neighbors = DTensor(np.asarray(track.window(t, self.window), dm.float_dtype()))
        scores = _attention_scores(neighbors, self.p)
        weights = dm.softmax(dm.reshape(scores, (1, self.window)), axis=1)
        fused = dm.matmul(weights, neighbors)
        return dm.reshape(fused, (self.dim,))


class FeatureExtractor:
    """Two same-padded 3x3 conv layers, 3 -> 64 -> 128, relu after the first."""

    def __init__(self, mid: int = 64, out: int = FEATURE_DIM,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.out_dim = out
        self.p = {
            "conv1.w": _param(rng, (3, 3, 3, mid), np.sqrt(2.0 / (9 * 3))),
            "conv1.b": _zeros(mid),
            "conv2.w": _param(rng, (3, 3, mid, out), np.sqrt(1.0 / (9 * mid))),
            "conv2.b": _zeros(out),
        }

    def __call__(self, image: np.ndarray | DTensor, frame_id: int = -1) -> FeatureMap:
        if not isinstance(image, DTensor):
            image = DTensor(np.asarray(image, dm.float_dtype()))
        if image.ndim != 3 or image.shape[2] != 3:
            raise dm.ShapeError(f"expected an (H, W, 3) image, got {image.shape}")
        h = dm.relu(dm.add(dm.conv2d(image, self.p["conv1.w"]), self.p["conv1.b"]))
        out = dm.add(dm.conv2d(h, self.p["conv2.w"]), self.p["conv2.b"])
        return FeatureMap(out, frame_id)


def sample_features(fmap: FeatureMap, u, v, mode: str) -> DTensor:
    """Sample (P,) continuous coordinates from a feature map -> (P, D).

    Coordinates are clamped to the grid. ``nearest`` rounds half-up to a
    grid cell and is not differentiable in (u, v); ``bilinear`` blends the
    four enclosing cells and backpropagates into grid and coordinates.
    """
    grid = fmap.data
    h, w = fmap.height, fmap.width
    if mode == "nearest":
        u_arr = u.data if isinstance(u, DTensor) else np.asarray(u)
        v_arr = v.data if isinstance(v, DTensor) else np.asarray(v)
        iu = np.minimum(np.floor(np.clip(u_arr, 0, w - 1) + 0.5), w - 1).astype(np.int64)
        iv = np.minimum(np.floor(np.clip(v_arr, 0, h - 1) + 0.5), h - 1).astype(np.int64)
        return dm.gather_hw(grid, iv, iu)
    if mode == "bilinear":
        if not isinstance(u, DTensor):
            u = DTensor(np.asarray(u, grid.dtype))
        if not isinstance(v, DTensor):
            v = DTensor(np.asarray(v, grid.dtype))
        return dm.bilinear_hw(grid, v, u)
    raise ValueError(f"unknown sampling mode {mode!r}; expected 'nearest' or 'bilinear'")


def sample_feature(fmap: FeatureMap, at, mode: str) -> DTensor:
    """Single-coordinate convenience wrapper; returns a (D,) vector."""
    out = sample_features(fmap, np.asarray([at.u], dtype=np.float64),
                          np.asarray([at.v], dtype=np.float64), mode)
    return dm.reshape(out, (fmap.data.shape[2],))


class Aggregator:
    """Softmax-attention fusion of N per-reference feature vectors."""

    def __init__(self, dim: int = FEATURE_DIM, hidden: int = ATTN_HIDDEN,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.dim = dim
        self.p = {
            "W": _param(rng, (dim, hidden), 1.0 / np.sqrt(dim)),
            "b": _zeros(hidden),
            "w": _param(rng, (hidden, 1), 1.0 / np.sqrt(hidden)),
        }

    def __call__(self, features: DTensor) -> DTensor:
        """(N, D) feature stack -> (D,) fused vector."""
        if features.ndim != 2 or features.shape[0] < 1:
            raise dm.ShapeError(f"need a non-empty (N, D) stack, got {features.shape}")
        rows = [dm.reshape(dm.slice_axis(features, 0, n, n + 1), (1, self.dim))
                for n in range(features.shape[0])]
        return dm.reshape(self.fuse_pointwise(rows), (self.dim,))

    def fuse_pointwise(self, features: list[DTensor],
                       score_bias: np.ndarray | None = None) -> DTensor:
        """Fuse N aligned (P, D) stacks into (P, D) with per-point attention.

        ``score_bias`` (P, N), if given, is added to the raw scores before
        the softmax; a large negative entry effectively removes a reference
        for that point (used for points behind a reference camera).
        """
        if not features:
            raise dm.ShapeError("need at least one reference feature stack")
        cols = [_attention_scores(f, self.p) for f in features]
        scores = dm.concat(cols, axis=1) if len(features) > 1 else cols[0]
        if score_bias is not None:
            scores = dm.add(scores, DTensor(np.asarray(score_bias, scores.dtype)))
        weights = dm.softmax(scores, axis=1)
        ones_row = DTensor(np.ones((1, self.dim), dm.float_dtype()))
        out = None
        for i, f in enumerate(features):
            w_col = dm.slice_axis(weights, 1, i, i + 1)
            term = dm.mul(dm.matmul(w_col, ones_row), f)
            out = term if out is None else dm.add(out, term)
        return out
