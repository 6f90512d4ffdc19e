"""Differentiable bilinear sampling and flow-based inverse warping.

Out-of-range coordinates are clamped to the border (no zero fill), so the
warped output is always a convex combination of source pixels. Gradients
at exact integer coordinates use the right-continuous weight derivative;
gradient checks should therefore probe off-lattice points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ShapeError, _result, add, constant


@dataclass(frozen=True)
class SampleGrid:
    """Continuous per-pixel source coordinates (pixels), each H x W."""

    xs: np.ndarray
    ys: np.ndarray

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=np.float32)
        ys = np.asarray(self.ys, dtype=np.float32)
        if xs.ndim != 2 or xs.shape != ys.shape:
            raise ValueError(f"grid coordinates must be matching 2-D arrays, got {xs.shape} and {ys.shape}")
        if not (np.isfinite(xs).all() and np.isfinite(ys).all()):
            raise ValueError("sample coordinates must be finite")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)


def identity_coords(height: int, width: int, dtype=np.float32) -> np.ndarray:
    """(2, H, W) array of pixel coordinates: channel 0 = x, channel 1 = y."""
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([xs, ys]).astype(dtype)


def bilinear_gather(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Numpy-only bilinear lookup with border clamping.

    ``image`` is (H, W) or (H, W, C); coordinates are any matching shape.
    Non-differentiable core shared with the classical estimator.
    """
    h, w = image.shape[:2]
    xc = np.clip(xs, 0, w - 1)
    yc = np.clip(ys, 0, h - 1)
    x0 = np.floor(xc).astype(np.intp)
    y0 = np.floor(yc).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    tx = (xc - x0).astype(image.dtype)
    ty = (yc - y0).astype(image.dtype)
    if image.ndim == 3:
        tx = tx[..., None]
        ty = ty[..., None]
    top = (1 - tx) * image[y0, x0] + tx * image[y0, x1]
    bot = (1 - tx) * image[y1, x0] + tx * image[y1, x1]
    return (1 - ty) * top + ty * bot


def bilinear_sample(img: Tensor, grid) -> Tensor:
    """Sample ``img`` at continuous coordinates, differentiable in both.

    ``grid`` may be a :class:`SampleGrid` (constant coordinates, shared by
    the whole batch) or a (B, 2, Hg, Wg) tensor with channel 0 holding x and
    channel 1 holding y; in the latter case gradients flow into the grid.
    """
    if isinstance(grid, SampleGrid):
        coords = np.broadcast_to(
            np.stack([grid.xs, grid.ys]).astype(img.dtype)[None],
            (img.shape[0], 2, grid.xs.shape[0], grid.xs.shape[1]),
        ).copy()
        grid = constant(coords)
    if not isinstance(grid, Tensor):
        raise TypeError(f"grid must be a SampleGrid or Tensor, got {type(grid).__name__}")
    if grid.shape[0] != img.shape[0] or grid.shape[1] != 2:
        raise ShapeError(f"grid shape {grid.shape} does not match image batch {img.shape}")
    return _sample_op(img, grid)


def _sample_op(img: Tensor, coords: Tensor) -> Tensor:
    b, c, h, w = img.shape
    _, _, hg, wg = coords.shape

    x = coords.data[:, 0]
    y = coords.data[:, 1]
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.floor(xc).astype(np.intp)
    y0 = np.floor(yc).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    tx = (xc - x0).astype(img.dtype)[..., None]             # (B, Hg, Wg, 1)
    ty = (yc - y0).astype(img.dtype)[..., None]

    imt = np.ascontiguousarray(img.data.transpose(0, 2, 3, 1))  # (B, H, W, C)
    bidx = np.arange(b)[:, None, None]
    v00 = imt[bidx, y0, x0]
    v01 = imt[bidx, y0, x1]
    v10 = imt[bidx, y1, x0]
    v11 = imt[bidx, y1, x1]
    out = ((1 - ty) * ((1 - tx) * v00 + tx * v01)
           + ty * ((1 - tx) * v10 + tx * v11))

    img_needs, grid_needs = img.requires_grad, coords.requires_grad

    def bw(g):
        gt = g.transpose(0, 2, 3, 1)                        # (B, Hg, Wg, C)
        g_img = None
        if img_needs:
            acc = np.zeros_like(imt)
            np.add.at(acc, (bidx, y0, x0), gt * ((1 - ty) * (1 - tx)))
            np.add.at(acc, (bidx, y0, x1), gt * ((1 - ty) * tx))
            np.add.at(acc, (bidx, y1, x0), gt * (ty * (1 - tx)))
            np.add.at(acc, (bidx, y1, x1), gt * (ty * tx))
            g_img = acc.transpose(0, 3, 1, 2)
        g_grid = None
        if grid_needs:
            gx = np.sum(gt * ((1 - ty) * (v01 - v00) + ty * (v11 - v10)), axis=-1)
            gy = np.sum(gt * ((1 - tx) * (v10 - v00) + tx * (v11 - v01)), axis=-1)
            gx *= (x >= 0) & (x <= w - 1)                   # zero outside the clamp range
            gy *= (y >= 0) & (y <= h - 1)
            g_grid = np.stack([gx, gy], axis=1).astype(coords.dtype, copy=False)
        return (g_img, g_grid)

    return _result(np.ascontiguousarray(out.transpose(0, 3, 1, 2)), (img, coords), bw)


def inverse_warp(i2: Tensor, flow: Tensor) -> Tensor:
    """Reconstruct frame 1 by sampling frame 2 at flow-displaced coordinates.

    output(x, y) = I2(x + u, y + v), bilinear, border clamped; fully
    differentiable with respect to the flow. Zero flow is the exact identity.
    """
    b, c, h, w = i2.shape
    if flow.shape != (b, 2, h, w):
        raise ShapeError(f"flow shape {flow.shape} does not match image shape {i2.shape}")
    base = np.broadcast_to(identity_coords(h, w, i2.dtype)[None], (b, 2, h, w)).copy()
    return _sample_op(i2, add(constant(base), flow))
