"""Training objectives and the evaluation metric.

Three differentiable losses:

* endpoint-error loss: (1/N) * sum sqrt((u - u')^2 + (v - v')^2), N the
  pixel count of the frame, batch-averaged; the root is smoothed as
  sqrt(d + 1e-12) to stay differentiable at zero error.
* reconstruction loss: mean generalized Charbonnier penalty
  rho(x) = (x^2 + eps^2)^alpha of the residual between frame 1 and the
  inverse-warped frame 2 (per channel, averaged over channels).
* multi-scale total: five prediction scales, each contributing an EPE term
  against the block-mean-downsampled proxy flow and, in finetune mode, an
  additional weighted reconstruction term against avg-pooled image
  pyramids (ten terms total). Flows are in own-scale pixel units, so the
  downsampled proxy values divide by the scale factor.

``epe_metric`` is the non-differentiable evaluation counterpart and
understands sparse reference flow through the valid mask (mask-averaged).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, ShapeError
from .flow_io import FlowField, Image, flows_to_tensor, images_to_tensor
from .warping import inverse_warp

EPE_SMOOTHING = 1e-12

DEFAULT_SCALE_WEIGHTS = (0.32, 0.08, 0.02, 0.01, 0.005)  # coarsest to finest

NUM_SCALES = 5
COARSEST_DIVISOR = 64


@dataclass(frozen=True)
class LossWeights:
    """Per-scale loss weights plus the reconstruction-term hyperparameters.

    ``lam`` is the reconstruction weight (the config key is ``lambda``).
    """

    scale_weights: tuple = DEFAULT_SCALE_WEIGHTS
    lam: float = 0.1
    alpha: float = 0.25
    epsilon: float = 1e-3

    def __post_init__(self):
        weights = tuple(float(w) for w in self.scale_weights)
        if len(weights) != NUM_SCALES:
            raise ValueError(f"need {NUM_SCALES} scale weights, got {len(weights)}")
        if any(w < 0 for w in weights) or self.lam < 0:
            raise ValueError("scale weights and lambda must be non-negative")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.epsilon <= 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        object.__setattr__(self, "scale_weights", weights)


def _as_flow_tensor(target, dtype) -> Tensor:
    if isinstance(target, FlowField):
        if target.valid_mask is not None:
            raise ValueError("training targets must be dense (no valid mask)")
        return flows_to_tensor(target, dtype=dtype)
    if isinstance(target, Tensor):
        return target
    raise TypeError(f"expected FlowField or Tensor, got {type(target).__name__}")


def _as_image_tensor(img, dtype) -> Tensor:
    if isinstance(img, Image):
        return images_to_tensor(img, dtype=dtype)
    if isinstance(img, Tensor):
        return img
    raise TypeError(f"expected Image or Tensor, got {type(img).__name__}")


def epe_loss(pred: Tensor, target) -> Tensor:
    """Differentiable average endpoint error against a dense target."""
    tgt = _as_flow_tensor(target, pred.dtype)
    if pred.shape != tgt.shape:
        raise ShapeError(f"epe_loss: prediction {pred.shape} vs target {tgt.shape}")
    if pred.shape[1] != 2:
        raise ShapeError(f"epe_loss: flow tensors have 2 channels, got {pred.shape[1]}")
    diff = ad.sub(pred, tgt)
    sq = ad.sum_channels(ad.mul(diff, diff))
    dist = ad.pow_scalar(ad.add_scalar(sq, EPE_SMOOTHING), 0.5)
    return ad.mean_all(dist)


def charbonnier(x: Tensor, alpha: float = 0.25, epsilon: float = 1e-3) -> Tensor:
    """Elementwise generalized Charbonnier penalty (x^2 + eps^2)^alpha."""
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    return ad.pow_scalar(ad.add_scalar(ad.mul(x, x), epsilon * epsilon), alpha)


def reconstruction_loss(i1, i2, flow: Tensor, weights: LossWeights) -> Tensor:
    """Photometric error between frame 1 and the inverse-warped frame 2."""
    i1t = _as_image_tensor(i1, flow.dtype)
    i2t = _as_image_tensor(i2, flow.dtype)
    if i1t.shape != i2t.shape:
        raise ShapeError(f"reconstruction_loss: image shapes differ, {i1t.shape} vs {i2t.shape}")
    if flow.shape != (i1t.shape[0], 2, i1t.shape[2], i1t.shape[3]):
        raise ShapeError(f"reconstruction_loss: flow {flow.shape} vs images {i1t.shape}")
    reconstructed = inverse_warp(i2t, flow)
    residual = ad.sub(i1t, reconstructed)
    return ad.mean_all(charbonnier(residual, weights.alpha, weights.epsilon))


def _block_mean(arr: np.ndarray, factor: int) -> np.ndarray:
    """Mean over factor x factor blocks of the last two axes."""
    h, w = arr.shape[-2], arr.shape[-1]
    if h % factor or w % factor:
        raise ShapeError(f"extents {h}x{w} not divisible by pooling factor {factor}")
    shape = arr.shape[:-2] + (h // factor, factor, w // factor, factor)
    return arr.reshape(shape).mean(axis=(-3, -1))


def multiscale_loss(preds, proxy, i1, i2, weights: LossWeights, mode: str) -> Tensor:
    """Weighted sum of the per-scale losses over the 5-level prediction pyramid.

    ``preds`` runs coarsest (1/64 scale) to finest (1/4); prediction k must
    have extents H / 2^(6-k) by W / 2^(6-k). ``guided`` mode sums the five
    EPE terms; ``finetune`` mode adds lam-weighted reconstruction terms on
    avg-pooled image pyramids. With lam = 0 the two modes coincide exactly.
    """
    if mode not in ("guided", "finetune"):
        raise ValueError(f"mode must be 'guided' or 'finetune', got {mode!r}")
    preds = list(preds)
    if len(preds) != NUM_SCALES:
        raise ShapeError(f"need {NUM_SCALES} predictions, got {len(preds)}")
    dtype = preds[0].dtype
    proxy_t = _as_flow_tensor(proxy, dtype)
    i1t = _as_image_tensor(i1, dtype)
    i2t = _as_image_tensor(i2, dtype)
    b, _, h, w = proxy_t.shape
    if h % COARSEST_DIVISOR or w % COARSEST_DIVISOR:
        raise ShapeError(f"extents {h}x{w} must be divisible by {COARSEST_DIVISOR}")

    use_reconstruction = mode == "finetune" and weights.lam != 0.0
    total = None
    for k, pred in enumerate(preds):
        factor = 2 ** (6 - k)
        expect = (b, 2, h // factor, w // factor)
        if pred.shape != expect:
            raise ShapeError(f"prediction {k} has shape {pred.shape}, expected {expect}")
        target = ad.constant(_block_mean(proxy_t.data, factor) / dtype.type(factor))
        term = epe_loss(pred, target)
        if use_reconstruction:
            i1k = ad.constant(_block_mean(i1t.data, factor))
            i2k = ad.constant(_block_mean(i2t.data, factor))
            term = ad.add(term, ad.scalar_mul(
                reconstruction_loss(i1k, i2k, pred, weights), weights.lam))
        weighted = ad.scalar_mul(term, weights.scale_weights[k])
        total = weighted if total is None else ad.add(total, weighted)
    return total


def epe_metric(pred: FlowField, gt: FlowField) -> float:
    """Average endpoint error, mask-averaged when gt carries a valid mask."""
    if (pred.height, pred.width) != (gt.height, gt.width):
        raise ShapeError(
            f"epe_metric: extents differ, {pred.height}x{pred.width} vs {gt.height}x{gt.width}")
    du = pred.u.astype(np.float64) - gt.u.astype(np.float64)
    dv = pred.v.astype(np.float64) - gt.v.astype(np.float64)
    err = np.sqrt(du * du + dv * dv)
    if gt.valid_mask is not None:
        if not gt.valid_mask.any():
            raise ValueError("epe_metric: reference mask is empty")
        err = err[gt.valid_mask]
    return float(err.mean())
