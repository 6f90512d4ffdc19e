"""Reverse-mode automatic differentiation on dense 4-D arrays.

Every tensor is (batch, channels, height, width); there is no broadcasting
and no implicit dtype promotion. The graph is rebuilt on every forward pass
(define-by-run) and torn down by garbage collection. float32 is the training
precision; building the inputs from float64 arrays keeps an entire graph in
float64, which is the path the finite-difference checks run on.

A graph instance is confined to one thread. Detached tensors carry no graph
references and may be shared freely.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes (or dtypes) violate an operation's contract."""


_node_counter = itertools.count()


class Tensor:
    """Dense 4-D array plus an optional gradient buffer of the same shape.

    ``requires_grad`` marks tensors that gradients must reach. Leaf tensors
    (no parents) accumulate into ``grad`` when :func:`backward` runs;
    interior nodes only pass gradients through.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "parents", "backward_fn")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim != 4:
            raise ShapeError(
                f"tensors are (batch, channels, height, width), got shape {arr.shape}"
            )
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_counter)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Copy of the values with no graph attached; safe to move across threads."""
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def zeros(shape, dtype=np.float32, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def _result(data, parents, backward_fn) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn)
    return Tensor(data)


def _check_binary(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes differ, {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: dtypes differ, {a.dtype} vs {b.dtype}")


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)
    return _result(a.data * s, (a,), lambda g: (g * s,))


def add_scalar(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)
    return _result(a.data + s, (a,), lambda g: (g,))


def pow_scalar(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p. For fractional p the base must be positive."""
    base = a.data
    out = base ** a.dtype.type(p)
    return _result(out, (a,), lambda g: (g * (p * out / base),))


def sum_all(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def bw(g):
        return (np.full(shape, g.reshape(()), dtype=dtype),)

    return _result(a.data.sum(dtype=dtype).reshape(1, 1, 1, 1), (a,), bw)


def mean_all(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.dtype
    n = a.data.size

    def bw(g):
        return (np.full(shape, g.reshape(()) / dtype.type(n), dtype=dtype),)

    return _result(a.data.mean(dtype=dtype).reshape(1, 1, 1, 1), (a,), bw)


def sum_channels(a: Tensor) -> Tensor:
    """Reduce the channel axis to 1, keeping the other extents."""
    c = a.shape[1]

    def bw(g):
        return (np.repeat(g, c, axis=1),)

    return _result(a.data.sum(axis=1, keepdims=True), (a,), bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    if (sa[0], sa[2], sa[3]) != (sb[0], sb[2], sb[3]):
        raise ShapeError(f"concat_channels: non-channel extents differ, {sa} vs {sb}")
    if a.dtype != b.dtype:
        raise ShapeError(f"concat_channels: dtypes differ, {a.dtype} vs {b.dtype}")
    ca = sa[1]

    def bw(g):
        return (g[:, :ca], g[:, ca:])

    return _result(np.concatenate([a.data, b.data], axis=1), (a, b), bw)


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in [0, 1), got {slope}")
    # subgradient 1 at exactly 0
    factor = np.where(a.data >= 0, a.dtype.type(1), a.dtype.type(slope))
    return _result(a.data * factor, (a,), lambda g: (g * factor,))


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) with scalar stride and padding.

    x: (B, C, H, W), w: (O, C, KH, KW), b: (1, O, 1, 1).
    """
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    bs, c, h, wid = x.shape
    o, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"conv2d: weight expects {cw} input channels, input has {c}")
    if b.shape != (1, o, 1, 1):
        raise ShapeError(f"conv2d: bias shape must be (1, {o}, 1, 1), got {b.shape}")
    if x.dtype != w.dtype or x.dtype != b.dtype:
        raise ShapeError("conv2d: mixed dtypes")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wid + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(
            f"conv2d: zero-sized output for input {h}x{wid}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}"
        )

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]                      # (B, C, Ho, Wo, KH, KW)
    col = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    col = col.reshape(bs * ho * wo, c * kh * kw)
    wmat = w.data.reshape(o, c * kh * kw)
    out = col @ wmat.T
    out = out.reshape(bs, ho, wo, o).transpose(0, 3, 1, 2) + b.data

    x_needs, w_needs, b_needs = x.requires_grad, w.requires_grad, b.requires_grad

    def bw(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(bs * ho * wo, o)
        gw = (gm.T @ col).reshape(o, c, kh, kw) if w_needs else None
        gb = g.sum(axis=(0, 2, 3)).reshape(1, o, 1, 1) if b_needs else None
        gx = None
        if x_needs:
            dcol = (gm @ wmat).reshape(bs, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            dxp = np.zeros_like(xp)
            hs, ws = stride * ho, stride * wo
            for ki in range(kh):
                for kj in range(kw):
                    dxp[:, :, ki:ki + hs:stride, kj:kj + ws:stride] += dcol[..., ki, kj]
            gx = dxp[:, :, padding:padding + h, padding:padding + wid] if padding else dxp
        return (gx, gw, gb)

    return _result(out, (x, w, b), bw)


_interp_cache: dict = {}


def _interp_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    """Dense 1-D bilinear resampling matrix, align-corners-false convention."""
    key = (n_out, n_in, np.dtype(dtype).name)
    m = _interp_cache.get(key)
    if m is None:
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        i0 = np.floor(src).astype(np.intp)
        t = src - i0
        lo = np.clip(i0, 0, n_in - 1)
        hi = np.clip(i0 + 1, 0, n_in - 1)
        m = np.zeros((n_out, n_in))
        np.add.at(m, (np.arange(n_out), lo), 1.0 - t)
        np.add.at(m, (np.arange(n_out), hi), t)
        m = np.ascontiguousarray(m, dtype=dtype)
        _interp_cache[key] = m
    return m


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain-numpy bilinear resize of the last two axes (align-corners-false).

    Shared non-differentiable core of the upsampling ops; also used for
    image pyramids and flow-field resampling outside the graph.
    """
    my = _interp_matrix(out_h, arr.shape[-2], np.float64 if arr.dtype == np.float64 else np.float32)
    mx = _interp_matrix(out_w, arr.shape[-1], my.dtype)
    out = np.tensordot(arr, my, axes=([arr.ndim - 2], [1]))   # (..., W, out_h)
    out = np.tensordot(out, mx, axes=([arr.ndim - 2], [1]))   # (..., out_h, out_w)
    return np.ascontiguousarray(out.astype(arr.dtype, copy=False))


def upsample_bilinear2x(x: Tensor) -> Tensor:
    """Bilinear 2x upsampling of height and width, align-corners-false."""
    bs, c, h, w = x.shape
    my = _interp_matrix(2 * h, h, x.dtype)
    mx = _interp_matrix(2 * w, w, x.dtype)
    out = np.einsum("ph,bchw,qw->bcpq", my, x.data, mx, optimize=True)

    def bw(g):
        return (np.einsum("ph,bcpq,qw->bchw", my, g, mx, optimize=True),)

    return _result(out, (x,), bw)


def avg_pool2x(x: Tensor) -> Tensor:
    """Mean over non-overlapping 2x2 blocks; extents must be even."""
    return avg_pool(x, 2)


def avg_pool(x: Tensor, factor: int) -> Tensor:
    bs, c, h, w = x.shape
    if factor < 1:
        raise ValueError(f"avg_pool: factor must be >= 1, got {factor}")
    if h % factor or w % factor:
        raise ShapeError(f"avg_pool: extents {h}x{w} not divisible by {factor}")
    if factor == 1:
        return _result(x.data.copy(), (x,), lambda g: (g,))
    hb, wb = h // factor, w // factor
    out = x.data.reshape(bs, c, hb, factor, wb, factor).mean(axis=(3, 5))
    inv = x.dtype.type(1.0 / (factor * factor))

    def bw(g):
        return (np.repeat(np.repeat(g * inv, factor, axis=2), factor, axis=3),)

    return _result(out, (x,), bw)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dLeaf into every requires_grad leaf under ``loss``.

    The loss must be scalar (all extents 1). Deterministic: the accumulation
    order is fixed by graph construction order.
    """
    if loss.shape != (1, 1, 1, 1):
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node.requires_grad and not node.parents:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            held = grads.get(parent.node_id)
            # first contribution may alias g; allocate on second to keep it intact
            grads[parent.node_id] = pg if held is None else held + pg


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter Adam moments; step counts updates applied to this state."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: Tensor, beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8) -> "AdamState":
        return cls(
            first_moment=np.zeros_like(param.data),
            second_moment=np.zeros_like(param.data),
            beta1=beta1, beta2=beta2, eps=eps,
        )


def adam_step(params, states, lr: float) -> None:
    """One bias-corrected Adam update over aligned parameter/state lists."""
    if len(params) != len(states):
        raise ValueError(f"adam_step: {len(params)} params vs {len(states)} states")
    for p, s in zip(params, states):
        if p.grad is None:
            raise ValueError("adam_step: parameter has no gradient (run backward first)")
        g = p.grad
        s.step += 1
        s.first_moment *= s.beta1
        s.first_moment += (1.0 - s.beta1) * g
        s.second_moment *= s.beta2
        s.second_moment += (1.0 - s.beta2) * (g * g)
        m_hat = s.first_moment / (1.0 - s.beta1 ** s.step)
        v_hat = s.second_moment / (1.0 - s.beta2 ** s.step)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + s.eps)).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    tol: float
    points: int
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = self.max_rel_err < self.tol

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return (f"{status}  {self.name}: max rel err {self.max_rel_err:.3e} "
                f"(tol {self.tol:.1e}, {self.points} points)")


def gradcheck(fn, inputs, tol: float = 1e-3, step: float = 1e-4, points: int = 20,
              rng=None, name: str = "") -> GradCheckResult:
    """Compare analytic gradients of ``fn`` against central finite differences.

    ``fn`` maps the given tensors to a scalar Tensor and must be pure and
    deterministic. Each requires_grad input is probed at up to ``points``
    randomly chosen coordinates. Failures are reported, not raised. Run this
    on float64 tensors; float32 rounding drowns the difference quotient.
    """
    tensors = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    rng = rng or np.random.default_rng(0)

    for t in tensors:
        t.zero_grad()
    backward(fn(*tensors))

    max_err = 0.0
    total = 0
    for t in tensors:
        if not t.requires_grad:
            continue
        if t.grad is None:
            raise ValueError("gradcheck: input received no gradient; is it used by fn?")
        n = t.data.size
        idxs = np.arange(n) if n <= points else rng.choice(n, size=points, replace=False)
        flat = t.data.reshape(-1)
        for i in idxs:
            saved = flat[i]
            flat[i] = saved + step
            f_plus = fn(*tensors).item()
            flat[i] = saved - step
            f_minus = fn(*tensors).item()
            flat[i] = saved
            numeric = (f_plus - f_minus) / (2.0 * step)
            analytic = float(t.grad.reshape(-1)[i])
            rel = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            max_err = max(max_err, rel)
            total += 1

    return GradCheckResult(name=name or getattr(fn, "__name__", "fn"),
                           max_rel_err=max_err, tol=tol, points=total)
