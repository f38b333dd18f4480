"""Heatmap target construction and sub-pixel coordinate decoding.

Targets come in three aligned variants per keypoint: the plain Gaussian
bump, a Laplacian-sharpened copy, and a Gaussian-smoothed copy.  Decoding
offers a quarter-pixel offset mode and a distribution-aware mode that
fits a local quadratic to the log-heatmap around the argmax.

All filters use zero padding (this slightly attenuates bumps near the
border) and cross-correlation semantics; the shipped Laplacian stencils
are symmetric so the distinction is moot there.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .tensor import Tensor

__all__ = [
    "LaplacianKernelSpec",
    "laplacian_kernel",
    "HeatmapTarget",
    "encode_targets",
    "laplacian_filter",
    "gaussian_blur",
    "decode_keypoints",
]

# High-pass stencils, stored exactly; `scale` keeps the filtered Gaussian
# peak comparable across sizes.
_LAPLACIAN_WEIGHTS = {
    3: (1.0, [[0, -1, 0],
              [-1, 4, -1],
              [0, -1, 0]]),
    5: (0.25, [[0, 0, -1, 0, 0],
               [0, -1, -2, -1, 0],
               [-1, -2, 16, -2, -1],
               [0, -1, -2, -1, 0],
               [0, 0, -1, 0, 0]]),
    7: (1.0 / 6.0, [[0, 0, -1, -1, -1, 0, 0],
                    [0, -1, -3, -3, -3, -1, 0],
                    [-1, -3, 0, 7, 0, -3, -1],
                    [-1, -3, 7, 24, 7, -3, -1],
                    [-1, -3, 0, 7, 0, -3, -1],
                    [0, -1, -3, -3, -3, -1, 0],
                    [0, 0, -1, -1, -1, 0, 0]]),
}


@dataclass(frozen=True)
class LaplacianKernelSpec:
    """A square high-pass stencil plus its normalizing scale factor."""

    size: int
    weights: np.ndarray
    scale: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (self.size, self.size):
            raise ValueError("kernel weights must be size x size")
        if abs(float(w.sum()) * self.scale) > 1e-12:
            raise ValueError("Laplacian kernel must sum to zero")
        object.__setattr__(self, "weights", w)

    @property
    def scaled(self) -> np.ndarray:
        return self.weights * self.scale


def laplacian_kernel(size: int = 3) -> LaplacianKernelSpec:
    """One of the three built-in stencils (3, 5 or 7)."""
    if size not in _LAPLACIAN_WEIGHTS:
        raise ValueError(f"no built-in Laplacian kernel of size {size}")
    scale, weights = _LAPLACIAN_WEIGHTS[size]
    return LaplacianKernelSpec(size=size, weights=np.asarray(weights, dtype=np.float64),
                               scale=scale)


@dataclass
class HeatmapTarget:
    """Ground-truth heatmaps: plain bumps plus sharpened/smoothed variants.

    Channels of keypoints with visibility 0 are all-zero in every variant.
    """

    base: np.ndarray
    sharp: np.ndarray
    smooth: np.ndarray
    sigma: float
    kernel_spec: LaplacianKernelSpec = field(default_factory=laplacian_kernel)


def _as_array(h) -> np.ndarray:
    return h.data if isinstance(h, Tensor) else np.asarray(h)


def laplacian_filter(h, spec: LaplacianKernelSpec) -> np.ndarray:
    """Per-channel high-pass filtering with zero padding, times spec.scale."""
    arr = _as_array(h)
    stack = arr[None] if arr.ndim == 2 else arr
    out = np.empty_like(stack, dtype=np.float64)
    kern = spec.scaled
    for i in range(stack.shape[0]):
        out[i] = ndimage.correlate(stack[i].astype(np.float64), kern,
                                   mode="constant", cval=0.0)
    return out[0] if arr.ndim == 2 else out


def _gaussian_kernel_1d(kernel_size: int, sigma: float) -> np.ndarray:
    if kernel_size % 2 == 0:
        raise ValueError("kernel_size must be odd")
    half = kernel_size // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-x * x / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(h, kernel_size: int = 13, sigma: float = 4.0) -> np.ndarray:
    """Separable normalized Gaussian smoothing with zero padding."""
    arr = _as_array(h)
    k1 = _gaussian_kernel_1d(kernel_size, sigma)
    stack = arr[None] if arr.ndim == 2 else arr
    out = np.empty_like(stack, dtype=np.float64)
    for i in range(stack.shape[0]):
        tmp = ndimage.correlate1d(stack[i].astype(np.float64), k1, axis=0,
                                  mode="constant", cval=0.0)
        out[i] = ndimage.correlate1d(tmp, k1, axis=1, mode="constant", cval=0.0)
    return out[0] if arr.ndim == 2 else out


def encode_targets(keypoints: Sequence[tuple], height: int, width: int,
                   sigma: float = 2.0,
                   kernel_spec: LaplacianKernelSpec | None = None,
                   blur_kernel: int = 13, blur_sigma: float = 4.0) -> HeatmapTarget:
    """Build per-keypoint Gaussian targets on an height x width grid.

    `keypoints` holds (x, y, visibility) triplets in heatmap coordinates.
    Each visible channel carries an unnormalized bump
    exp(-((u-x)^2 + (v-y)^2) / (2 sigma^2)) rescaled so the grid maximum
    (at the quantized keypoint location) is exactly 1.0; the sub-pixel mode
    of the bump is preserved for decoding.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    spec = kernel_spec or laplacian_kernel(3)
    n = len(keypoints)
    base = np.zeros((n, height, width), dtype=np.float64)
    vv, uu = np.meshgrid(np.arange(height, dtype=np.float64),
                         np.arange(width, dtype=np.float64), indexing="ij")
    for i, (x, y, vis) in enumerate(keypoints):
        if vis <= 0:
            continue
        if not (0 <= x < width and 0 <= y < height):
            raise ValueError(f"visible keypoint {i} at ({x}, {y}) is outside the "
                             f"{height}x{width} grid")
        bump = np.exp(-((uu - x) ** 2 + (vv - y) ** 2) / (2.0 * sigma * sigma))
        base[i] = bump / bump.max()
    sharp = laplacian_filter(base, spec)
    smooth = gaussian_blur(base, blur_kernel, blur_sigma)
    return HeatmapTarget(base=base, sharp=sharp, smooth=smooth, sigma=sigma,
                         kernel_spec=spec)


def _quarter_offset(chan: np.ndarray, y: int, x: int) -> tuple[float, float]:
    h, w = chan.shape
    dx = 0.0
    dy = 0.0
    if 0 < x < w - 1:
        dx = 0.25 * np.sign(chan[y, x + 1] - chan[y, x - 1])
    if 0 < y < h - 1:
        dy = 0.25 * np.sign(chan[y + 1, x] - chan[y - 1, x])
    return dx, dy


def _taylor_offset(logmap: np.ndarray, y: int, x: int) -> tuple[float, float]:
    # 2x2 Newton step on the log-heatmap; sample points are clamped to the
    # interior so border argmaxes still get a defined (coarser) estimate.
    h, w = logmap.shape
    yc = min(max(y, 1), h - 2)
    xc = min(max(x, 1), w - 2)
    gx = 0.5 * (logmap[yc, xc + 1] - logmap[yc, xc - 1])
    gy = 0.5 * (logmap[yc + 1, xc] - logmap[yc - 1, xc])
    hxx = logmap[yc, xc + 1] - 2.0 * logmap[yc, xc] + logmap[yc, xc - 1]
    hyy = logmap[yc + 1, xc] - 2.0 * logmap[yc, xc] + logmap[yc - 1, xc]
    hxy = 0.25 * (logmap[yc + 1, xc + 1] - logmap[yc + 1, xc - 1]
                  - logmap[yc - 1, xc + 1] + logmap[yc - 1, xc - 1])
    hess = np.array([[hxx, hxy], [hxy, hyy]])
    if abs(np.linalg.det(hess)) < 1e-12:
        hess = hess + 1e-8 * np.eye(2)
    try:
        off = -np.linalg.solve(hess, np.array([gx, gy]))
    except np.linalg.LinAlgError:
        return 0.0, 0.0
    dx = float(np.clip(off[0], -1.0, 1.0))
    dy = float(np.clip(off[1], -1.0, 1.0))
    return dx, dy


def decode_keypoints(heatmaps, mode: str = "distribution_aware",
                     blur_kernel: int = 11, blur_sigma: float = 2.0) -> np.ndarray:
    """Recover (x, y, score) per channel from predicted heatmaps.

    Ties at the maximum are broken by row-major order.  An all-zero channel
    decodes to (0, 0, 0); a zero score marks the result invalid.  Scores are
    the raw channel maxima, untouched by the decoding transform.
    """
    arr = _as_array(heatmaps)
    if arr.ndim != 3:
        raise ValueError("decode_keypoints expects [N, h, w]")
    if mode not in ("argmax_quarter_offset", "distribution_aware"):
        raise ValueError(f"unknown decode mode {mode!r}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite heatmap")
    n, h, w = arr.shape
    out = np.zeros((n, 3), dtype=np.float64)

    if mode == "distribution_aware":
        blurred = gaussian_blur(arr, blur_kernel, blur_sigma)

    for i in range(n):
        chan = arr[i]
        peak = float(chan.max())
        if peak <= 0.0 and chan.min() == 0.0:
            continue
        flat = int(np.argmax(chan))
        y, x = divmod(flat, w)
        if mode == "argmax_quarter_offset":
            dx, dy = _quarter_offset(chan, y, x)
        else:
            mod = blurred[i]
            mmax = mod.max()
            if mmax > 0:
                # keep the original amplitude so the log curvature matches
                mod = mod * (peak / mmax)
            logmap = np.log(np.maximum(mod, 1e-10))
            dx, dy = _taylor_offset(logmap, y, x)
        out[i] = (x + dx, y + dy, peak)
    return out
