"""Tape-based reverse-mode automatic differentiation over dense numpy arrays.

Differentiable values are `DTensor`s. Operations executed while a `Tape` is
active are recorded in execution order; `Tape.backward` replays the records
in reverse, calling each operation's vector-Jacobian closure, and returns a
gradient for every leaf tensor created with ``requires_grad=True``.

Two numeric profiles are supported globally: ``"test"`` (float64, used for
gradient checking) and ``"train"`` (float32). The profile fixes the dtype of
newly created tensors and constants; it never silently converts existing
arrays.

Broadcasting is deliberately restricted: two operand shapes must either be
equal, or one must be an exact trailing suffix of the other (the shorter
operand is tiled over the leading axes). Anything else, including numpy-legal
alignments like (P, 1) with (P,), is rejected with a ShapeError so that shape
bugs surface at the call site instead of as a silently huge intermediate.
"""

from __future__ import annotations

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values or lost conditioning."""


# --------------------------------------------------------------------------
# numeric profiles


_PROFILES = {"test": np.float64, "train": np.float32}
_active_profile = "test"


def set_profile(name: str) -> None:
    global _active_profile
    if name not in _PROFILES:
        raise ValueError(f"unknown numeric profile {name!r}; expected one of {sorted(_PROFILES)}")
    _active_profile = name


def get_profile() -> str:
    return _active_profile


def float_dtype() -> np.dtype:
    """Dtype of tensors created under the active profile."""
    return np.dtype(_PROFILES[_active_profile])


# --------------------------------------------------------------------------
# tensors


_node_ids = itertools.count()


class DTensor:
    """A dense array plus an identity on the tape.

    ``data`` is always a numpy array and is treated as immutable once
    wrapped; in-place parameter updates go through ``assign_``, which is an
    explicit optimizer-side mutation, never part of a recorded graph.
    """

    __slots__ = ("data", "requires_grad", "node_id", "grad")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=float_dtype())
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def assign_(self, new_data: np.ndarray) -> None:
        """Replace the stored array (optimizer step). Shape must not change."""
        if new_data.shape != self.data.shape:
            raise ShapeError(f"assign_: shape {new_data.shape} vs stored {self.data.shape}")
        self.data = np.asarray(new_data, dtype=self.data.dtype)

    def detach(self) -> "DTensor":
        return DTensor(self.data, requires_grad=False)

    # Arithmetic sugar; every overload routes through the recorded ops below.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"DTensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> DTensor:
    """Wrap ``data`` as a DTensor in the active profile's dtype."""
    return DTensor(np.asarray(data, dtype=float_dtype()), requires_grad=requires_grad)


def constant(data) -> DTensor:
    return tensor(data, requires_grad=False)


def _as_dtensor(x) -> DTensor:
    if isinstance(x, DTensor):
        return x
    return DTensor(np.asarray(x, dtype=float_dtype()))


# --------------------------------------------------------------------------
# tape


class _Record:
    __slots__ = ("out_id", "inputs", "vjp", "needs")

    def __init__(self, out_id, inputs, vjp, needs):
        self.out_id = out_id
        self.inputs = inputs  # tuple of DTensor
        self.vjp = vjp        # vjp(g, needs) -> tuple of arrays/None, one per input
        self.needs = needs    # tuple of bool: does this input want a gradient


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Execution-ordered record of differentiable operations.

    Use as a context manager. ``backward`` consumes the tape: records are
    replayed newest-first exactly once and then discarded.
    """

    def __init__(self):
        self._records: list[_Record] = []
        # node ids through which gradient can flow: requires_grad leaves and
        # outputs of recorded operations
        self._flowing: set[int] = set()
        self._leaves: dict[int, DTensor] = {}

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def _wants(self, t: DTensor) -> bool:
        return t.requires_grad or t.node_id in self._flowing

    def _record(self, out: DTensor, inputs: tuple[DTensor, ...], vjp) -> None:
        needs = tuple(self._wants(t) for t in inputs)
        self._records.append(_Record(out.node_id, inputs, vjp, needs))
        self._flowing.add(out.node_id)
        for t, n in zip(inputs, needs):
            if n and t.requires_grad and t.node_id not in self._flowing:
                self._leaves[t.node_id] = t

    def backward(self, loss: DTensor) -> dict[int, DTensor]:
        """Accumulate gradients of a scalar loss; returns {leaf node_id: grad}.

        Also sets ``.grad`` (a numpy array) on each leaf tensor. The tape is
        cleared afterwards and cannot be replayed.
        """
        if loss.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        if loss.node_id not in self._flowing:
            raise ValueError("backward: loss was not computed under this tape")
        if not np.isfinite(loss.data).all():
            raise NumericalError(f"backward: loss is non-finite ({loss.data!r})")

        grads: dict[int, np.ndarray] = {
            loss.node_id: np.ones_like(np.asarray(loss.data))
        }
        for rec in reversed(self._records):
            g = grads.pop(rec.out_id, None)
            if g is None:
                continue
            input_grads = rec.vjp(g, rec.needs)
            for t, need, gi in zip(rec.inputs, rec.needs, input_grads):
                if not need or gi is None:
                    continue
                acc = grads.get(t.node_id)
                if acc is None:
                    grads[t.node_id] = gi
                else:
                    grads[t.node_id] = acc + gi

        out: dict[int, DTensor] = {}
        for nid, leaf in self._leaves.items():
            g = grads.get(nid)
            if g is None:
                g = np.zeros_like(leaf.data)
            leaf.grad = g
            out[nid] = DTensor(g)

        self._records.clear()
        self._flowing.clear()
        self._leaves.clear()
        return out

    def __len__(self) -> int:
        return len(self._records)


def _current_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _finish(out: DTensor, inputs: tuple[DTensor, ...], vjp) -> DTensor:
    tape = _current_tape()
    if tape is not None and any(tape._wants(t) for t in inputs):
        out.requires_grad = True
        tape._record(out, inputs, vjp)
    return out


# --------------------------------------------------------------------------
# broadcasting helpers


def _suffix_align(a_shape: tuple[int, ...], b_shape: tuple[int, ...], opname: str) -> None:
    """Check the restricted broadcast rule: equal, or one a trailing suffix."""
    if a_shape == b_shape:
        return
    small, big = (a_shape, b_shape) if len(a_shape) < len(b_shape) else (b_shape, a_shape)
    if len(small) == len(big) or (small and big[len(big) - len(small):] != small):
        raise ShapeError(f"{opname}: shapes {a_shape} vs {b_shape} are not equal "
                         f"and neither is a trailing suffix of the other")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the leading axes added by suffix broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# --------------------------------------------------------------------------
# primitive operations


def add(a, b) -> DTensor:
    a, b = _as_dtensor(a), _as_dtensor(b)
    _suffix_align(a.shape, b.shape, "add")
    out = DTensor(a.data + b.data)

    def vjp(g, needs):
        ga = _reduce_to(g, a.shape) if needs[0] else None
        gb = _reduce_to(g, b.shape) if needs[1] else None
        return ga, gb

    return _finish(out, (a, b), vjp)


def sub(a, b) -> DTensor:
    a, b = _as_dtensor(a), _as_dtensor(b)
    _suffix_align(a.shape, b.shape, "sub")
    out = DTensor(a.data - b.data)

    def vjp(g, needs):
        ga = _reduce_to(g, a.shape) if needs[0] else None
        gb = -_reduce_to(g, b.shape) if needs[1] else None
        return ga, gb

    return _finish(out, (a, b), vjp)


def mul(a, b) -> DTensor:
    a, b = _as_dtensor(a), _as_dtensor(b)
    _suffix_align(a.shape, b.shape, "mul")
    out = DTensor(a.data * b.data)
    a_data, b_data = a.data, b.data

    def vjp(g, needs):
        ga = _reduce_to(g * b_data, a.shape) if needs[0] else None
        gb = _reduce_to(g * a_data, b.shape) if needs[1] else None
        return ga, gb

    return _finish(out, (a, b), vjp)


def matmul(a, b) -> DTensor:
    """Matrix product with standard tensor semantics.

    Supported operand ranks: (..., m, k) @ (k, n), (m, k) @ (..., k, n), and
    batched-by-batched with identical leading axes. Vector operands are not
    accepted; reshape first.
    """
    a, b = _as_dtensor(a), _as_dtensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch axes differ, {a.shape} @ {b.shape}")
    out = DTensor(a.data @ b.data)
    a_data, b_data = a.data, b.data

    def vjp(g, needs):
        ga = gb = None
        if needs[0]:
            ga = g @ np.swapaxes(b_data, -1, -2)
            ga = _reduce_to(ga, a.shape)
        if needs[1]:
            if b_data.ndim == 2:
                k = a_data.shape[-1]
                n = g.shape[-1]
                gb = a_data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(a_data, -1, -2) @ g
                gb = _reduce_to(gb, b.shape)
        return ga, gb

    return _finish(out, (a, b), vjp)


def exp(x) -> DTensor:
    x = _as_dtensor(x)
    out = DTensor(np.exp(x.data))
    out_data = out.data

    def vjp(g, needs):
        return (g * out_data,) if needs[0] else (None,)

    return _finish(out, (x,), vjp)


def log(x) -> DTensor:
    x = _as_dtensor(x)
    out = DTensor(np.log(x.data))
    x_data = x.data

    def vjp(g, needs):
        return (g / x_data,) if needs[0] else (None,)

    return _finish(out, (x,), vjp)


def sin(x) -> DTensor:
    x = _as_dtensor(x)
    out = DTensor(np.sin(x.data))
    x_data = x.data

    def vjp(g, needs):
        return (g * np.cos(x_data),) if needs[0] else (None,)

    return _finish(out, (x,), vjp)


def cos(x) -> DTensor:
    x = _as_dtensor(x)
    out = DTensor(np.cos(x.data))
    x_data = x.data

    def vjp(g, needs):
        return (-g * np.sin(x_data),) if needs[0] else (None,)

    return _finish(out, (x,), vjp)


def sqrt(x) -> DTensor:
    x = _as_dtensor(x)
    out = DTensor(np.sqrt(x.data))
    out_data = out.data

    def vjp(g, needs):
        return (g / (2.0 * out_data),) if needs[0] else (None,)

    return _finish(out, (x,), vjp)


def relu(x) -> DTensor:
    x = _as_dtensor(x)
    out = DTensor(np.maximum(x.data, 0))
    mask = x.data > 0

    def vjp(g, needs):
        return (g * mask,) if needs[0] else (None,)

    return _finish(out, (x,), vjp)


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    # Branch on sign so neither exp() overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x) -> DTensor:
    x = _as_dtensor(x)
    out = DTensor(_sigmoid_stable(np.asarray(x.data)))
    out_data = out.data

    def vjp(g, needs):
        return (g * out_data * (1.0 - out_data),) if needs[0] else (None,)

    return _finish(out, (x,), vjp)


def softplus(x) -> DTensor:
    """log(1 + exp(x)), computed without overflow for large |x|."""
    x = _as_dtensor(x)
    out = DTensor(np.logaddexp(0.0, x.data).astype(x.data.dtype, copy=False))
    x_data = x.data

    def vjp(g, needs):
        return (g * _sigmoid_stable(np.asarray(x_data)),) if needs[0] else (None,)

    return _finish(out, (x,), vjp)


def tanh(x) -> DTensor:
    """Composed as 2*sigmoid(2x) - 1 so it reuses the stable sigmoid kernel."""
    return sub(mul(sigmoid(mul(x, 2.0)), 2.0), 1.0)


def softmax(x, axis: int = -1) -> DTensor:
    x = _as_dtensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = DTensor(s)

    def vjp(g, needs):
        if not needs[0]:
            return (None,)
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _finish(out, (x,), vjp)


def sum_(x, axis=None, keepdims: bool = False) -> DTensor:
    x = _as_dtensor(x)
    out = DTensor(x.data.sum(axis=axis, keepdims=keepdims))
    x_shape = x.shape

    def vjp(g, needs):
        if not needs[0]:
            return (None,)
        if axis is None:
            return (np.broadcast_to(g, x_shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, x_shape).copy(),)

    return _finish(out, (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> DTensor:
    x = _as_dtensor(x)
    out = DTensor(x.data.mean(axis=axis, keepdims=keepdims))
    x_shape = x.shape
    count = x.size if axis is None else x.shape[axis]

    def vjp(g, needs):
        if not needs[0]:
            return (None,)
        if axis is None:
            return (np.broadcast_to(g / count, x_shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp / count, x_shape).copy(),)

    return _finish(out, (x,), vjp)


def concat(parts, axis: int = 0) -> DTensor:
    parts = tuple(_as_dtensor(p) for p in parts)
    if not parts:
        raise ShapeError("concat: need at least one operand")
    out = DTensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g, needs):
        pieces = np.split(g, splits, axis=axis)
        return tuple(piece if need else None for piece, need in zip(pieces, needs))

    return _finish(out, parts, vjp)


def slice_axis(x, axis: int, start: int, stop: int) -> DTensor:
    """Contiguous slice [start:stop] along one axis."""
    x = _as_dtensor(x)
    if not (0 <= start <= stop <= x.shape[axis]):
        raise ShapeError(f"slice_axis: [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    idx = (slice(None),) * (axis % x.ndim) + (slice(start, stop),)
    out = DTensor(x.data[idx].copy())
    x_shape = x.shape

    def vjp(g, needs):
        if not needs[0]:
            return (None,)
        gx = np.zeros(x_shape, dtype=g.dtype)
        gx[idx] = g
        return (gx,)

    return _finish(out, (x,), vjp)


def reshape(x, shape) -> DTensor:
    x = _as_dtensor(x)
    shape = tuple(shape)
    out = DTensor(x.data.reshape(shape))
    x_shape = x.shape

    def vjp(g, needs):
        return (g.reshape(x_shape),) if needs[0] else (None,)

    return _finish(out, (x,), vjp)


def broadcast(x, shape) -> DTensor:
    """Tile ``x`` over new leading axes so its shape becomes ``shape``."""
    x = _as_dtensor(x)
    shape = tuple(shape)
    _suffix_align(x.shape, shape, "broadcast")
    if len(x.shape) > len(shape):
        raise ShapeError(f"broadcast: cannot shrink {x.shape} to {shape}")
    out = DTensor(np.broadcast_to(x.data, shape).copy())
    x_shape = x.shape

    def vjp(g, needs):
        return (_reduce_to(g, x_shape),) if needs[0] else (None,)

    return _finish(out, (x,), vjp)


def gather_hw(grid, iv, iu) -> DTensor:
    """Integer lookup ``grid[iv[p], iu[p], :]`` on an (H, W, C) feature grid.

    ``iv``/``iu`` are plain integer arrays (no gradient flows into indices).
    Duplicate indices accumulate in the backward scatter.
    """
    grid = _as_dtensor(grid)
    iv = np.asarray(iv)
    iu = np.asarray(iu)
    if grid.ndim != 3:
        raise ShapeError(f"gather_hw: grid must be (H, W, C), got {grid.shape}")
    h, w, _ = grid.shape
    if iv.min(initial=0) < 0 or iu.min(initial=0) < 0 or \
       iv.max(initial=0) >= h or iu.max(initial=0) >= w:
        raise ShapeError(f"gather_hw: indices out of bounds for grid {grid.shape}")
    out = DTensor(grid.data[iv, iu, :])
    grid_shape = grid.shape

    def vjp(g, needs):
        if not needs[0]:
            return (None,)
        gg = np.zeros(grid_shape, dtype=g.dtype)
        np.add.at(gg, (iv, iu), g)
        return (gg,)

    return _finish(out, (grid,), vjp)


def bilinear_hw(grid, v, u) -> DTensor:
    """Bilinear sample of an (H, W, C) grid at fractional pixel centers.

    ``v``/``u`` are DTensors of shape (P,) holding row/column coordinates;
    gradients flow into the grid and into both coordinate arrays. Coordinates
    are clamped to the valid square [0, H-1] x [0, W-1] before interpolation,
    and the coordinate gradient is zeroed where clamping was active.
    """
    grid = _as_dtensor(grid)
    v = _as_dtensor(v)
    u = _as_dtensor(u)
    if grid.ndim != 3:
        raise ShapeError(f"bilinear_hw: grid must be (H, W, C), got {grid.shape}")
    if v.ndim != 1 or u.shape != v.shape:
        raise ShapeError(f"bilinear_hw: coordinates must be matching 1-d arrays, "
                         f"got {v.shape} and {u.shape}")
    h, w, _ = grid.shape

    vc = np.clip(v.data, 0.0, h - 1.0)
    uc = np.clip(u.data, 0.0, w - 1.0)
    v_in = (v.data > 0.0) & (v.data < h - 1.0)
    u_in = (u.data > 0.0) & (u.data < w - 1.0)

    v0 = np.floor(vc).astype(np.int64)
    u0 = np.floor(uc).astype(np.int64)
    v0 = np.minimum(v0, h - 2) if h > 1 else v0
    u0 = np.minimum(u0, w - 2) if w > 1 else u0
    v1 = np.minimum(v0 + 1, h - 1)
    u1 = np.minimum(u0 + 1, w - 1)
    fv = (vc - v0)[:, None]
    fu = (uc - u0)[:, None]

    g00 = grid.data[v0, u0, :]
    g01 = grid.data[v0, u1, :]
    g10 = grid.data[v1, u0, :]
    g11 = grid.data[v1, u1, :]
    top = g00 * (1.0 - fu) + g01 * fu
    bot = g10 * (1.0 - fu) + g11 * fu
    out = DTensor(top * (1.0 - fv) + bot * fv)
    grid_shape = grid.shape

    def vjp(g, needs):
        g_grid = g_v = g_u = None
        if needs[0]:
            g_grid = np.zeros(grid_shape, dtype=g.dtype)
            np.add.at(g_grid, (v0, u0), g * (1.0 - fv) * (1.0 - fu))
            np.add.at(g_grid, (v0, u1), g * (1.0 - fv) * fu)
            np.add.at(g_grid, (v1, u0), g * fv * (1.0 - fu))
            np.add.at(g_grid, (v1, u1), g * fv * fu)
        if needs[1]:
            d_dv = bot - top
            g_v = (g * d_dv).sum(axis=1) * v_in
        if needs[2]:
            d_du = (g01 - g00) * (1.0 - fv) + (g11 - g10) * fv
            g_u = (g * d_du).sum(axis=1) * u_in
        return g_grid, g_v, g_u

    return _finish(out, (grid, v, u), vjp)


def conv2d(image, weights) -> DTensor:
    """Same-padded stride-1 2-d convolution.

    ``image`` is (H, W, Cin), ``weights`` is (kh, kw, Cin, Cout) with odd
    kernel sides; output is (H, W, Cout). Zero padding keeps the spatial
    size. The input patches are materialized once and shared with the
    backward closure.
    """
    image = _as_dtensor(image)
    weights = _as_dtensor(weights)
    if image.ndim != 3 or weights.ndim != 4:
        raise ShapeError(f"conv2d: expected (H,W,Cin) and (kh,kw,Cin,Cout), "
                         f"got {image.shape} and {weights.shape}")
    kh, kw, cin, cout = weights.shape
    if image.shape[2] != cin:
        raise ShapeError(f"conv2d: image channels {image.shape[2]} != kernel Cin {cin}")
    if kh % 2 != 1 or kw % 2 != 1:
        raise ShapeError(f"conv2d: kernel sides must be odd, got ({kh}, {kw})")
    h, w, _ = image.shape
    ph, pw = kh // 2, kw // 2

    padded = np.pad(image.data, ((ph, ph), (pw, pw), (0, 0)))
    # (H, W, Cin, kh, kw) -> (H*W, kh*kw*Cin) patch matrix
    windows = sliding_window_view(padded, (kh, kw), axis=(0, 1))
    patches = np.ascontiguousarray(windows.transpose(0, 1, 3, 4, 2))
    patches = patches.reshape(h * w, kh * kw * cin)
    wmat = weights.data.reshape(kh * kw * cin, cout)
    out = DTensor((patches @ wmat).reshape(h, w, cout))
    w_shape = weights.shape
    im_dtype = image.data.dtype

    def vjp(g, needs):
        g2 = g.reshape(h * w, cout)
        g_img = g_w = None
        if needs[1]:
            g_w = (patches.T @ g2).reshape(w_shape)
        if needs[0]:
            dpatch = (g2 @ wmat.T).reshape(h, w, kh, kw, cin)
            gp = np.zeros((h + 2 * ph, w + 2 * pw, cin), dtype=im_dtype)
            for ky in range(kh):
                for kx in range(kw):
                    gp[ky:ky + h, kx:kx + w, :] += dpatch[:, :, ky, kx, :]
            g_img = gp[ph:ph + h, pw:pw + w, :]
        return g_img, g_w

    return _finish(out, (image, weights), vjp)


# --------------------------------------------------------------------------
# gradient checking


def grad_check(f, x: DTensor, step: float = 1e-5, sample: int | None = None,
               seed: int = 0) -> float:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` maps one DTensor to one DTensor. Non-scalar outputs are reduced
    with a fixed random probe vector so a single backward pass covers the
    whole Jacobian. Returns max_i |analytic_i - numeric_i| / max(1, |numeric_i|).

    ``sample``, if given, checks that many coordinates of ``x`` (chosen by a
    seeded generator) instead of all of them; the analytic side is always
    exact and complete.
    """
    rng = np.random.default_rng(seed)
    leaf = DTensor(np.array(x.data, dtype=np.float64), requires_grad=True)

    probe_cache: dict[tuple[int, ...], np.ndarray] = {}

    def scalarize(y: DTensor) -> DTensor:
        if y.size == 1:
            return sum_(y)
        probe = probe_cache.get(y.shape)
        if probe is None:
            probe = np.asarray(rng.standard_normal(y.shape), dtype=np.float64)
            probe_cache[y.shape] = probe
        return sum_(mul(y, DTensor(probe)))

    with Tape() as tape:
        loss = scalarize(f(leaf))
    grads = tape.backward(loss)
    analytic = grads[leaf.node_id].data

    def eval_loss(arr: np.ndarray) -> float:
        y = f(DTensor(arr))
        if y.size == 1:
            return float(np.sum(y.data))
        return float(np.sum(y.data * probe_cache[y.shape]))

    flat = leaf.data.reshape(-1)
    n = flat.size
    if sample is None or sample >= n:
        indices = np.arange(n)
    else:
        indices = rng.choice(n, size=sample, replace=False)
        indices.sort()

    worst = 0.0
    base = flat.copy()
    for i in indices:
        orig = base[i]
        base[i] = orig + step
        lo_hi = eval_loss(base.reshape(leaf.shape))
        base[i] = orig - step
        lo_lo = eval_loss(base.reshape(leaf.shape))
        base[i] = orig
        numeric = (lo_hi - lo_lo) / (2.0 * step)
        err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
        if err > worst:
            worst = err
    return float(worst)
