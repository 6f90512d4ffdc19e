"""Finite-difference verification of every differentiable operation.

Each scenario builds float64 inputs at off-lattice points (warping weights
are only piecewise smooth, so probes stay away from integer coordinates)
and compares analytic gradients against central differences. Used by the
``gofl gradcheck`` command and the acceptance suite.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckResult, Tensor, gradcheck
from .losses import LossWeights, charbonnier, epe_loss, multiscale_loss, reconstruction_loss
from .model import ModelConfig, forward, init_model
from .warping import inverse_warp

DEFAULT_TOL = 1e-3


def _rand(rng, shape, lo=-1.0, hi=1.0, requires_grad=True) -> Tensor:
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=requires_grad)


def _offgrid_flow(rng, shape) -> Tensor:
    """Flow values bounded away from the integer lattice."""
    base = rng.uniform(-1.8, 1.8, shape)
    frac = base - np.floor(base)
    base = np.where((frac < 0.15) | (frac > 0.85), base + 0.3, base)
    return Tensor(base, requires_grad=True)


def check_conv2d(points=20, tol=DEFAULT_TOL):
    rng = np.random.default_rng(11)
    x = _rand(rng, (1, 2, 5, 5))
    w = _rand(rng, (3, 2, 3, 3))
    b = _rand(rng, (1, 3, 1, 1))
    fn = lambda x, w, b: ad.mean_all(ad.conv2d(x, w, b, stride=2, padding=1))
    return gradcheck(fn, [x, w, b], tol=tol, points=points, rng=rng, name="conv2d")


def check_upsample_bilinear2x(points=20, tol=DEFAULT_TOL):
    rng = np.random.default_rng(12)
    x = _rand(rng, (1, 2, 3, 4))
    fn = lambda x: ad.mean_all(ad.mul(ad.upsample_bilinear2x(x), ad.constant(
        np.linspace(0.5, 1.5, 96).reshape(1, 2, 6, 8))))
    return gradcheck(fn, x, tol=tol, points=points, rng=rng, name="upsample_bilinear2x")


def check_avg_pool2x(points=20, tol=DEFAULT_TOL):
    rng = np.random.default_rng(13)
    x = _rand(rng, (1, 3, 4, 4))
    weights = ad.constant(rng.uniform(0.5, 1.5, (1, 3, 2, 2)))
    fn = lambda x: ad.mean_all(ad.mul(ad.avg_pool2x(x), weights))
    return gradcheck(fn, x, tol=tol, points=points, rng=rng, name="avg_pool2x")


def check_leaky_relu(points=20, tol=DEFAULT_TOL):
    rng = np.random.default_rng(14)
    vals = rng.uniform(-2.0, 2.0, (1, 2, 4, 4))
    vals[np.abs(vals) < 0.05] += 0.2    # keep probes away from the kink
    x = Tensor(vals, requires_grad=True)
    fn = lambda x: ad.sum_all(ad.mul(ad.leaky_relu(x, 0.1), x))
    return gradcheck(fn, x, tol=tol, points=points, rng=rng, name="leaky_relu")


def check_charbonnier(points=20, tol=DEFAULT_TOL):
    rng = np.random.default_rng(15)
    x = _rand(rng, (1, 1, 4, 4))
    fn = lambda x: ad.mean_all(charbonnier(x, alpha=0.25, epsilon=1e-3))
    return gradcheck(fn, x, tol=tol, points=points, rng=rng, name="charbonnier")


def check_epe_loss(points=20, tol=DEFAULT_TOL):
    rng = np.random.default_rng(16)
    pred = _rand(rng, (1, 2, 4, 4), -2.0, 2.0)
    target = ad.constant(rng.uniform(-2.0, 2.0, (1, 2, 4, 4)))
    fn = lambda pred: epe_loss(pred, target)
    return gradcheck(fn, pred, tol=tol, points=points, rng=rng, name="epe_loss")


def check_inverse_warp(points=20, tol=DEFAULT_TOL):
    rng = np.random.default_rng(17)
    img = Tensor(rng.uniform(0.0, 1.0, (1, 1, 6, 6)), requires_grad=True)
    flow = _offgrid_flow(rng, (1, 2, 6, 6))
    weights = ad.constant(rng.uniform(0.5, 1.5, (1, 1, 6, 6)))
    fn = lambda img, flow: ad.sum_all(ad.mul(inverse_warp(img, flow), weights))
    return gradcheck(fn, [img, flow], tol=tol, points=points, rng=rng, name="inverse_warp")


def check_reconstruction_loss(points=20, tol=DEFAULT_TOL):
    rng = np.random.default_rng(18)
    i1 = ad.constant(rng.uniform(0.0, 1.0, (1, 1, 6, 6)))
    i2 = ad.constant(rng.uniform(0.0, 1.0, (1, 1, 6, 6)))
    flow = _offgrid_flow(rng, (1, 2, 6, 6))
    w = LossWeights()
    fn = lambda flow: reconstruction_loss(i1, i2, flow, w)
    return gradcheck(fn, flow, tol=tol, points=points, rng=rng, name="reconstruction_loss")


def check_multiscale_network(points=12, tol=DEFAULT_TOL):
    """Full path: both frames through a tiny network into the ten-term
    fine-tune loss, probing parameters across encoder, decoder and heads."""
    rng = np.random.default_rng(19)
    cfg = ModelConfig(base_channels=2)
    params = init_model(cfg, seed=5, dtype=np.float64)
    i1 = ad.constant(rng.uniform(0.0, 1.0, (1, 1, 64, 64)))
    i2 = ad.constant(rng.uniform(0.0, 1.0, (1, 1, 64, 64)))
    proxy = ad.constant(rng.uniform(-2.3, 2.3, (1, 2, 64, 64)))
    weights = LossWeights()

    probed = [params.tensors[name] for name in
              ("enc1.weight", "enc6.bias", "dec2.weight", "dec4.bias", "pred4.weight")]
    for t in params.tensors.values():
        t.requires_grad = t in probed

    def fn(*_):
        preds = forward(params, i1, i2)
        return multiscale_loss(preds, proxy, i1, i2, weights, "finetune")

    result = gradcheck(fn, probed, tol=tol, points=points, rng=rng, name="multiscale_network")
    for t in params.tensors.values():
        t.requires_grad = True
    return result


ALL_CHECKS = (
    check_conv2d,
    check_upsample_bilinear2x,
    check_avg_pool2x,
    check_leaky_relu,
    check_charbonnier,
    check_epe_loss,
    check_inverse_warp,
    check_reconstruction_loss,
    check_multiscale_network,
)


def run_all(points=20, tol=DEFAULT_TOL) -> list[GradCheckResult]:
    results = []
    for check in ALL_CHECKS:
        if check is check_multiscale_network:
            results.append(check(points=max(10, points // 2), tol=tol))
        else:
            results.append(check(points=points, tol=tol))
    return results
