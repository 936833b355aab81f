"""Volume rendering with background-pixel compositing, plus the losses.

A ray with samples t_1..t_n accumulates color as C = sum_i T_i alpha_i c_i
with alpha_i = 1 - exp(-sigma_i d_i), d_i = t_{i+1} - t_i, and transmittance
T_i = exp(-sum_{j<i} sigma_j d_j). The terminal sample is special: its color
is replaced by the ray's stored background pixel and its opacity is forced
to 1, which closes the weight sum at exactly one and makes an empty ray
reproduce the background bit for bit.

Transmittance uses an exclusive cumulative sum expressed as one matmul with
a constant strictly-triangular matrix, so the whole composite stays inside
the autodiff engine's primitive set and chunks of rays render bitwise
identically to the full batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dynfield import diffmath as dm
from dynfield.diffmath import DTensor

DEFAULT_LAMBDA = 5e-8


def _cumsum_matrix(n_field: int, dtype) -> np.ndarray:
    """(n_field, n_field+1) matrix M with M[j, i] = 1 iff j < i.

    x @ M puts sum_{j<i} x_j in column i; column 0 is zero and the last
    column holds the full sum, i.e. the exponent of the terminal sample's
    transmittance.
    """
    m = np.zeros((n_field, n_field + 1), dtype=dtype)
    for j in range(n_field):
        m[j, j + 1:] = 1.0
    return m


def composite_rays(sigma: DTensor, colors: DTensor, deltas: np.ndarray,
                   background: np.ndarray) -> tuple[DTensor, DTensor]:
    """Composite R rays with S field samples each plus the background terminal.

    ``sigma`` is (R*S, 1) and ``colors`` (R*S, 3), flattened row-major so
    point index = ray * S + sample; ``deltas`` is a constant (R, S) array of
    depth intervals and ``background`` a constant (R, 3) array of per-ray
    background pixels. Returns the rendered (R, 3) colors and the (R,)
    weight sums (which the background rule pins to 1 up to roundoff).
    """
    n_rays, n_field = deltas.shape
    if sigma.shape != (n_rays * n_field, 1):
        raise dm.ShapeError(f"sigma {sigma.shape} does not match {n_rays} rays "
                            f"x {n_field} samples")
    if colors.shape != (n_rays * n_field, 3):
        raise dm.ShapeError(f"colors {colors.shape} does not match sigma rows")
    dt = sigma.dtype
    deltas_c = DTensor(np.asarray(deltas, dt))

    sig_d = dm.mul(dm.reshape(sigma, (n_rays, n_field)), deltas_c)
    trans = dm.exp(dm.mul(dm.matmul(sig_d, DTensor(_cumsum_matrix(n_field, dt))), -1.0))
    t_field = dm.slice_axis(trans, 1, 0, n_field)
    t_last = dm.slice_axis(trans, 1, n_field, n_field + 1)
    alpha = dm.sub(1.0, dm.exp(dm.mul(sig_d, -1.0)))
    weights = dm.mul(t_field, alpha)

    channels = []
    for ch in range(3):
        col = dm.reshape(dm.slice_axis(colors, 1, ch, ch + 1), (n_rays, n_field))
        acc = dm.sum_(dm.mul(weights, col), axis=1, keepdims=True)
        bg = DTensor(np.asarray(background[:, ch:ch + 1], dt))
        channels.append(dm.add(acc, dm.mul(t_last, bg)))
    rendered = dm.concat(channels, axis=1)
    weight_sum = dm.add(dm.sum_(weights, axis=1, keepdims=True), t_last)
    return rendered, dm.reshape(weight_sum, (n_rays,))


def render_ray(depths: np.ndarray, sigmas, colors, background: np.ndarray,
               z_far: float) -> tuple[DTensor, DTensor]:
    """Composite one ray; the final sample's color/opacity follow the
    background rule, so its entries in ``sigmas``/``colors`` are ignored.

    Returns the (3,) color and the scalar weight sum.
    """
    depths = np.asarray(depths, dtype=np.float64)
    n = depths.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 samples per ray, got {n}")
    if not np.all(np.diff(depths) > 0):
        raise ValueError("sample depths must be strictly increasing")
    if depths[-1] > z_far:
        raise ValueError(f"last sample {depths[-1]} beyond z_far {z_far}")
    if not isinstance(sigmas, DTensor):
        sigmas = DTensor(np.asarray(sigmas, dm.float_dtype()))
    if not isinstance(colors, DTensor):
        colors = DTensor(np.asarray(colors, dm.float_dtype()))
    if sigmas.size != n or colors.shape != (n, 3):
        raise dm.ShapeError(f"expected {n} sigmas and ({n}, 3) colors, got "
                            f"{sigmas.shape} and {colors.shape}")

    deltas = np.diff(depths)[None, :]  # (1, n-1); the terminal interval is unused
    sig_field = dm.reshape(dm.slice_axis(dm.reshape(sigmas, (n, 1)), 0, 0, n - 1),
                           (n - 1, 1))
    col_field = dm.slice_axis(colors, 0, 0, n - 1)
    bg = np.asarray(background, dtype=np.float64).reshape(1, 3)
    rendered, wsum = composite_rays(sig_field, col_field, deltas, bg)
    return dm.reshape(rendered, (3,)), dm.reshape(wsum, ())


def point_alphas(sigma_data: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Detached per-point opacities 1 - exp(-sigma*delta) for the regularizer.

    ``sigma_data`` is the raw (R*S, 1) density array (no gradient), deltas
    the matching (R, S) intervals; returns a flat (R*S,) array in [0, 1].
    """
    flat = sigma_data.reshape(deltas.shape)
    return (1.0 - np.exp(-flat * deltas)).reshape(-1)


def mse_loss(rendered: DTensor, truth: np.ndarray) -> DTensor:
    """Mean over rays and channels of the squared color residual."""
    truth = np.asarray(truth, rendered.dtype)
    if rendered.shape != truth.shape:
        raise dm.ShapeError(f"rendered {rendered.shape} vs truth {truth.shape}")
    diff = dm.sub(rendered, DTensor(truth))
    return dm.mean(dm.mul(diff, diff))


@dataclass(frozen=True)
class LossReport:
    l_mse: float
    l_reg: float
    lam: float
    total: float
    total_tensor: DTensor


def total_loss(l_mse: DTensor, l_reg: DTensor | None, lam: float = DEFAULT_LAMBDA
               ) -> LossReport:
    """Combine the pixel loss and the offset regularizer: total = mse + lam*reg."""
    if lam < 0:
        raise ValueError(f"regularizer weight must be nonnegative, got {lam}")
    if l_reg is None:
        l_reg = DTensor(np.asarray(0.0, l_mse.dtype))
    total = dm.add(l_mse, dm.mul(l_reg, float(lam)))
    return LossReport(l_mse=float(l_mse.data), l_reg=float(l_reg.data),
                      lam=float(lam), total=float(total.data), total_tensor=total)


# Rays per internal compute block during frame rendering. BLAS kernels pick
# different (equally valid) instruction sequences for different matrix row
# counts, so identical rays in differently sized batches can differ in the
# last bit. Fixing the block geometry to the frame, independent of the
# caller's chunk size, is what makes renders bitwise chunk-invariant.
RENDER_BLOCK = 128


def render_frame(model, camera, refs, condition: DTensor, n_samples: int,
                 chunk: int = 1024) -> np.ndarray:
    """Deterministic full-frame render -> (H, W, 3) float array in [0, 1].

    Peak memory is bounded by the fixed internal block of ``RENDER_BLOCK``
    rays; output rows are copied out in runs of at most ``chunk`` pixels.
    The result is bitwise independent of ``chunk``. Sampling uses bin
    midpoints (jitter off).
    """
    from dynfield import geometry, model as model_mod

    if chunk < 1:
        raise ValueError(f"chunk size must be positive, got {chunk}")
    h, w = camera.height, camera.width
    us, vs = np.meshgrid(np.arange(w), np.arange(h))
    pixels = np.stack([us.reshape(-1), vs.reshape(-1)], axis=1)
    background = camera.background.reshape(-1, 3)

    out = np.zeros((h * w, 3), dtype=np.float64)
    for lo in range(0, h * w, RENDER_BLOCK):
        hi = min(lo + RENDER_BLOCK, h * w)
        # pad the tail block by repeating the last pixel: every matrix in
        # the forward pass keeps the exact same number of rows
        idx = np.minimum(np.arange(lo, lo + RENDER_BLOCK), h * w - 1)
        origins, dirs = geometry.generate_rays_batch(camera.intrinsics, camera.pose,
                                                     pixels[idx])
        depths = geometry.sample_depths(camera.z_near, camera.z_far, n_samples,
                                        RENDER_BLOCK, jitter=False)
        rendered, _, _ = model_mod.render_rays(model, origins, dirs, depths,
                                               background[idx], refs, condition)
        out[lo:hi] = rendered.data[:hi - lo].astype(np.float64)
    return out.reshape(h, w, 3)
