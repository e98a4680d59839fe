"""Dense float64 tensors with tape-based reverse-mode autodiff.

Every primitive the network needs lives here: 3x3 convolution, depthwise 1x3
convolution, layer norm, softmax, bilinear resize, elementwise ops, linear
projection and the reshape/permute layout moves. Each primitive records a
node on the active Graph (when one is open) carrying a closure that maps the
output gradient to input gradients; `backward` replays the tape in reverse.

Shapes are strict: apart from the bias vectors of conv/linear/layer_norm,
no broadcasting is performed and mismatches raise ShapeError. All math is
float64; checkpoints downcast at the serialization boundary only.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ContractError, DomainError, ShapeError

__all__ = [
    "Tensor", "Graph", "backward", "as_tensor",
    "add", "sub", "hadamard", "scale", "relu", "log1p", "expm1", "absolute",
    "tsum", "mean", "conv2d", "conv1d_depthwise", "layer_norm", "softmax",
    "bilinear_resize", "linear", "reshape", "permute",
    "flatten_spatial", "unflatten_spatial",
]


class Tensor:
    """N-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"every extent must be >= 1, got dims {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def dims(self) -> tuple:
        return tuple(self.data.shape)

    @property
    def numel(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.numel != 1:
            raise ContractError(f"item() needs a scalar tensor, dims={self.dims}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(dims={self.dims}, requires_grad={self.requires_grad})"

    # Small conveniences used by tests; the named functions are the real API.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("op", "inputs", "output", "bwd")

    def __init__(self, op, inputs, output, bwd):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.bwd = bwd


class Graph:
    """Tape of executed primitives, recorded in forward execution order.

    Being an append-only log of the forward pass, the node list is already
    topologically sorted; `backward` walks it once in reverse. A graph is
    single-use: build it, run backward, discard. The active-graph stack is
    thread-local, so concurrent passes on disjoint tapes stay independent.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _stack().pop()
        assert popped is self
        return False


_TLS = threading.local()


def _stack() -> list:
    try:
        return _TLS.graphs
    except AttributeError:
        _TLS.graphs = []
        return _TLS.graphs


def _active_graph():
    stack = _stack()
    return stack[-1] if stack else None


def record(op: str, inputs, out: Tensor, bwd) -> Tensor:
    """Attach `out` to the active tape if any input participates in autodiff.

    `bwd` receives the output gradient (ndarray) and returns one gradient
    (ndarray or None) per input, in order. Exposed for modules that define
    fused primitives with hand-derived backward rules.
    """
    g = _active_graph()
    if g is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        g.nodes.append(_Node(op, tuple(inputs), out, bwd))
    return out


def backward(loss: Tensor, graph: Graph):
    """Populate `.grad` on every requires_grad leaf reachable in `graph`.

    Leaves recorded on the tape but not on any path to `loss` receive zero
    gradient. Gradients accumulate into existing `.grad` arrays.
    """
    if loss.numel != 1:
        raise ContractError(f"backward needs a scalar loss, dims={loss.dims}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(n.output) for n in graph.nodes}
    for node in reversed(graph.nodes):
        gout = grads.pop(id(node.output), None)
        if gout is None:
            continue  # output feeds nothing on the loss path
        gins = node.bwd(gout)
        for t, g in zip(node.inputs, gins):
            if g is None:
                continue
            prev = grads.get(id(t))
            grads[id(t)] = g if prev is None else prev + g
    seen = set()
    for node in graph.nodes:
        for t in node.inputs:
            if id(t) in seen or not t.requires_grad or id(t) in produced:
                continue
            seen.add(id(t))
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            g = grads.get(id(t))
            if g is not None:
                t.grad += g


def _check_same_shape(op, a, b):
    if a.dims != b.dims:
        raise ShapeError(f"{op}: operand dims {a.dims} != {b.dims}")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("add", a, b)
    out = Tensor(a.data + b.data)
    return record("add", (a, b), out, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("sub", a, b)
    out = Tensor(a.data - b.data)
    return record("sub", (a, b), out, lambda g: (g, -g))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("hadamard", a, b)
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data
    return record("hadamard", (a, b), out, lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    out = Tensor(a.data * s)
    return record("scale", (a,), out, lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0
    return record("relu", (a,), out, lambda g: (g * mask,))


def log1p(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log1p(a.data))
    ad = a.data
    return record("log1p", (a,), out, lambda g: (g / (1.0 + ad),))


def expm1(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.expm1(a.data))
    ad = a.data
    return record("expm1", (a,), out, lambda g: (g * np.exp(ad),))


def absolute(a: Tensor) -> Tensor:
    """|a|, with subgradient 0 at exact zeros."""
    a = as_tensor(a)
    out = Tensor(np.abs(a.data))
    sgn = np.sign(a.data)
    return record("abs", (a,), out, lambda g: (g * sgn,))


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements, as a 1-element tensor."""
    a = as_tensor(a)
    out = Tensor(np.array([a.data.sum()]))
    shape = a.data.shape
    return record("sum", (a,), out, lambda g: (np.full(shape, g.reshape(-1)[0]),))


def mean(a: Tensor) -> Tensor:
    return scale(tsum(a), 1.0 / a.numel)


# ---------------------------------------------------------------------------
# convolutions


def _im2col3x3(xp: np.ndarray, H: int, W: int) -> np.ndarray:
    """Stack the 9 shifted views of a zero-padded (B,C,H+2,W+2) map.

    Returns (B, C*9, H*W) with channel-major, tap-minor ordering so it lines
    up with kernel.reshape(Cout, Cin*9).
    """
    B, C = xp.shape[:2]
    cols = np.empty((B, C, 9, H * W))
    k = 0
    for di in range(3):
        for dj in range(3):
            cols[:, :, k] = xp[:, :, di:di + H, dj:dj + W].reshape(B, C, -1)
            k += 1
    return cols.reshape(B, C * 9, H * W)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1. (B,Cin,H,W) -> (B,Cout,H,W)."""
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be (B,Cin,H,W), got {x.dims}")
    if kernel.data.ndim != 4 or kernel.dims[2:] != (3, 3):
        raise ShapeError(f"conv2d: kernel must be (Cout,Cin,3,3), got {kernel.dims}")
    B, Cin, H, W = x.dims
    Cout = kernel.dims[0]
    if kernel.dims[1] != Cin:
        raise ShapeError(f"conv2d: kernel expects Cin={kernel.dims[1]}, input has {Cin}")
    if bias.dims != (Cout,):
        raise ShapeError(f"conv2d: bias must be ({Cout},), got {bias.dims}")

    xp = np.zeros((B, Cin, H + 2, W + 2))
    xp[:, :, 1:H + 1, 1:W + 1] = x.data
    cols = _im2col3x3(xp, H, W)                       # (B, Cin*9, HW)
    wmat = kernel.data.reshape(Cout, Cin * 9)
    out_mat = np.matmul(wmat, cols) + bias.data[None, :, None]
    out = Tensor(out_mat.reshape(B, Cout, H, W))

    xd, wd = x.data, kernel.data

    def bwd(g):
        gm = g.reshape(B, Cout, H * W)
        # recompute cols from the saved input; cheaper than keeping them alive
        xpb = np.zeros((B, Cin, H + 2, W + 2))
        xpb[:, :, 1:H + 1, 1:W + 1] = xd
        cb = _im2col3x3(xpb, H, W)
        gw = np.matmul(gm, cb.transpose(0, 2, 1)).sum(axis=0).reshape(Cout, Cin, 3, 3)
        gcols = np.matmul(wd.reshape(Cout, Cin * 9).T, gm)    # (B, Cin*9, HW)
        gcols = gcols.reshape(B, Cin, 3, 3, H, W)
        gxp = np.zeros((B, Cin, H + 2, W + 2))
        for di in range(3):
            for dj in range(3):
                gxp[:, :, di:di + H, dj:dj + W] += gcols[:, :, di, dj]
        gb = gm.sum(axis=(0, 2))
        return gxp[:, :, 1:H + 1, 1:W + 1], gw, gb

    return record("conv2d", (x, kernel, bias), out, bwd)


def conv1d_depthwise(seq: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Depthwise width-3 convolution along L with zero padding 1.

    (B,L,C) with kernel (C,3): out[b,l,c] = sum_j kernel[c,j]*seq[b,l+j-1,c].
    """
    seq, kernel, bias = as_tensor(seq), as_tensor(kernel), as_tensor(bias)
    if seq.data.ndim != 3:
        raise ShapeError(f"conv1d_depthwise: input must be (B,L,C), got {seq.dims}")
    B, L, C = seq.dims
    if kernel.dims != (C, 3):
        raise ShapeError(f"conv1d_depthwise: kernel must be ({C},3), got {kernel.dims}")
    if bias.dims != (C,):
        raise ShapeError(f"conv1d_depthwise: bias must be ({C},), got {bias.dims}")

    xp = np.zeros((B, L + 2, C))
    xp[:, 1:L + 1] = seq.data
    kd = kernel.data
    out_d = np.zeros((B, L, C))
    for j in range(3):
        out_d += xp[:, j:j + L] * kd[:, j]
    out = Tensor(out_d + bias.data)

    xd = seq.data

    def bwd(g):
        gxp = np.zeros((B, L + 2, C))
        gk = np.empty((C, 3))
        xpb = np.zeros((B, L + 2, C))
        xpb[:, 1:L + 1] = xd
        for j in range(3):
            gxp[:, j:j + L] += g * kd[:, j]
            gk[:, j] = (g * xpb[:, j:j + L]).sum(axis=(0, 1))
        gb = g.sum(axis=(0, 1))
        return gxp[:, 1:L + 1], gk, gb

    return record("conv1d_depthwise", (seq, kernel, bias), out, bwd)


# ---------------------------------------------------------------------------
# normalization / attention


def layer_norm(seq: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the channel axis of (B,L,C), population variance."""
    seq, gamma, beta = as_tensor(seq), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise DomainError("layer_norm: eps must be > 0")
    if seq.data.ndim != 3:
        raise ShapeError(f"layer_norm: input must be (B,L,C), got {seq.dims}")
    C = seq.dims[2]
    if gamma.dims != (C,) or beta.dims != (C,):
        raise ShapeError(f"layer_norm: gamma/beta must be ({C},)")

    mu = seq.data.mean(axis=2, keepdims=True)
    var = seq.data.var(axis=2, keepdims=True)     # divides by C
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (seq.data - mu) * inv
    out = Tensor(xhat * gamma.data + beta.data)

    gd = gamma.data

    def bwd(g):
        gxhat = g * gd
        m1 = gxhat.mean(axis=2, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=2, keepdims=True)
        gx = inv * (gxhat - m1 - xhat * m2)
        ggamma = (g * xhat).sum(axis=(0, 1))
        gbeta = g.sum(axis=(0, 1))
        return gx, ggamma, gbeta

    return record("layer_norm", (seq, gamma, beta), out, bwd)


def softmax(t: Tensor, axis: int) -> Tensor:
    """Numerically stable softmax along `axis` (max-subtraction)."""
    t = as_tensor(t)
    nd = t.data.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"softmax: axis {axis} out of range for dims {t.dims}")
    z = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return record("softmax", (t,), out, bwd)


# ---------------------------------------------------------------------------
# resampling


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) bilinear weights, half-pixel centers,
    edges clamped."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - f)
    np.add.at(m, (rows, i1), f)
    return m


def bilinear_resize(img: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize (B,C,H,W) to (B,C,out_h,out_w); same-size calls pass through."""
    img = as_tensor(img)
    if img.data.ndim != 4:
        raise ShapeError(f"bilinear_resize: input must be (B,C,H,W), got {img.dims}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: target {out_h}x{out_w} invalid")
    B, C, H, W = img.dims
    if out_h == H and out_w == W:
        out = Tensor(img.data.copy())
        return record("bilinear_resize", (img,), out, lambda g: (g,))

    mh = _resize_matrix(H, out_h)       # (out_h, H)
    mw = _resize_matrix(W, out_w)       # (out_w, W)
    tmp = np.einsum("oh,bchw->bcow", mh, img.data, optimize=True)
    out = Tensor(np.einsum("pw,bcow->bcop", mw, tmp, optimize=True))

    def bwd(g):
        t = np.einsum("pw,bcop->bcow", mw, g, optimize=True)
        return (np.einsum("oh,bcow->bchw", mh, t, optimize=True),)

    return record("bilinear_resize", (img,), out, bwd)


# ---------------------------------------------------------------------------
# projections / layout


def linear(seq: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map per position: (B,L,C) @ (C,C') + (C',) -> (B,L,C')."""
    seq, weight, bias = as_tensor(seq), as_tensor(weight), as_tensor(bias)
    if seq.data.ndim != 3 or weight.data.ndim != 2:
        raise ShapeError(f"linear: need (B,L,C) and (C,C'), got {seq.dims}, {weight.dims}")
    if seq.dims[2] != weight.dims[0]:
        raise ShapeError(f"linear: inner dims disagree: {seq.dims[2]} vs {weight.dims[0]}")
    if bias.dims != (weight.dims[1],):
        raise ShapeError(f"linear: bias must be ({weight.dims[1]},), got {bias.dims}")
    out = Tensor(seq.data @ weight.data + bias.data)
    sd, wd = seq.data, weight.data

    def bwd(g):
        gseq = g @ wd.T
        gw = np.einsum("blc,bld->cd", sd, g, optimize=True)
        gb = g.sum(axis=(0, 1))
        return gseq, gw, gb

    return record("linear", (seq, weight, bias), out, bwd)


def reshape(t: Tensor, dims) -> Tensor:
    t = as_tensor(t)
    dims = tuple(int(d) for d in dims)
    if int(np.prod(dims)) != t.numel:
        raise ShapeError(f"reshape: {t.dims} has {t.numel} elements, target {dims}")
    out = Tensor(t.data.reshape(dims))
    src = t.dims
    return record("reshape", (t,), out, lambda g: (g.reshape(src),))


def permute(t: Tensor, axes) -> Tensor:
    t = as_tensor(t)
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(t.data.ndim)):
        raise ShapeError(f"permute: axes {axes} not a permutation of dims {t.dims}")
    out = Tensor(np.ascontiguousarray(t.data.transpose(axes)))
    inv = tuple(np.argsort(axes))
    return record("permute", (t,), out, lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def flatten_spatial(t: Tensor) -> Tensor:
    """(B,C,H,W) -> (B,L,C) with L=H*W; element (b,c,h,w) lands at (b, h*W+w, c)."""
    if len(t.dims) != 4:
        raise ShapeError(f"flatten_spatial: input must be (B,C,H,W), got {t.dims}")
    B, C, H, W = t.dims
    return reshape(permute(t, (0, 2, 3, 1)), (B, H * W, C))


def unflatten_spatial(t: Tensor, h: int, w: int) -> Tensor:
    """(B,L,C) -> (B,C,h,w); inverse of flatten_spatial."""
    if len(t.dims) != 3:
        raise ShapeError(f"unflatten_spatial: input must be (B,L,C), got {t.dims}")
    B, L, C = t.dims
    if L != h * w:
        raise ShapeError(f"unflatten_spatial: L={L} != {h}*{w}")
    return permute(reshape(t, (B, h, w, C)), (0, 3, 1, 2))
