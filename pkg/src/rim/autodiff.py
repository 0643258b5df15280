"""Tape-based reverse-mode automatic differentiation on dense numpy arrays.

Only the handful of operations needed by the inference networks are
provided: elementwise nonlinearities, same-shape arithmetic, channel
concatenation/slicing, 3x3 (transpose) convolutions, a convolutional GRU
cell, reductions and the MSE loss.  Every differentiable operation records a
node on the active :class:`Graph`; :func:`backward` walks that tape in
reverse and consumes it.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import expit

__all__ = [
    "Tensor",
    "Graph",
    "tensor",
    "parameter",
    "current_graph",
    "new_graph",
    "no_grad",
    "grad_enabled",
    "get_dtype",
    "set_precision",
    "precision",
    "record",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "neg",
    "tanh",
    "sigmoid",
    "softplus",
    "relu",
    "elementwise",
    "concat",
    "channel_slice",
    "batch_scale",
    "sum",
    "mean",
    "mse",
    "conv2d",
    "conv2d_transpose",
    "conv_output_size",
    "gru_step",
    "gru_step_reference",
    "linear_map",
]

_PRECISIONS = {"float32": np.float32, "float64": np.float64}
_dtype = np.float32
check_finite = True

_local = threading.local()


def get_dtype():
    return _dtype


def set_precision(name: str) -> None:
    """Switch the default floating point type (``"float32"`` or ``"float64"``)."""
    global _dtype
    try:
        _dtype = _PRECISIONS[name]
    except KeyError:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}") from None


@contextlib.contextmanager
def precision(name: str):
    previous = _dtype
    set_precision(name)
    try:
        yield
    finally:
        globals()["_dtype"] = previous


class Tensor:
    """Dense real array that may participate in the autodiff graph.

    Tensors are treated as immutable once produced by an operation. Leaf
    tensors (parameters) may be updated in place by an optimizer between
    rollouts.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "is_leaf", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.is_leaf = True

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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}{label})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        if isinstance(other, Tensor) and other.shape == self.shape:
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return neg(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# graph recording

class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Graph:
    """Operation tape for one rollout.

    Nodes are appended in execution order, which is a valid topological
    order, so the backward sweep simply walks the tape in reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn) -> None:
        self.nodes.append(_Node(out, tuple(inputs), backward_fn))

    def reset(self) -> None:
        self.nodes.clear()


def _stack() -> list[Graph]:
    stack = getattr(_local, "graphs", None)
    if stack is None:
        stack = _local.graphs = [Graph()]
    return stack


def current_graph() -> Graph:
    return _stack()[-1]


@contextlib.contextmanager
def new_graph():
    """Record into a fresh graph for the duration of the block."""
    graph = Graph()
    _stack().append(graph)
    try:
        yield graph
    finally:
        _stack().pop()


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    previous = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


def record(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``out_data`` in a Tensor and, if needed, put a node on the tape.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per
    input, each shaped like that input.
    """
    if check_finite and not np.all(np.isfinite(out_data)):
        raise FloatingPointError("non-finite values produced by a tensor operation")
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs, dtype=out_data.dtype)
    if needs:
        out.is_leaf = False
        current_graph().record(out, inputs, backward_fn)
    return out


def backward(loss: Tensor, graph: Graph | None = None) -> dict[Tensor, np.ndarray]:
    """Back-propagate from a scalar ``loss`` and consume the graph.

    Returns a mapping from every reached ``requires_grad`` leaf to its
    gradient.  Gradients are also accumulated into ``leaf.grad``.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss is detached from the graph (no input requires grad)")
    graph = graph if graph is not None else current_graph()

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.is_leaf:
        leaves[id(loss)] = loss
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
            if inp.is_leaf:
                leaves[key] = inp
    graph.reset()

    result = {}
    for key, leaf in leaves.items():
        g = grads[key].astype(leaf.dtype, copy=False)
        leaf.grad = g if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    return result


# ---------------------------------------------------------------------------
# elementwise

def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def neg(x: Tensor) -> Tensor:
    return record(-x.data, (x,), lambda g: (-g,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return record(x.data + x.dtype.type(c), (x,), lambda g: (g,))


def scale(x: Tensor, s) -> Tensor:
    """Multiply by a scalar, either a number or a single-element Tensor."""
    if isinstance(s, Tensor):
        if s.size != 1:
            raise ValueError(f"scale factor must be a scalar, got shape {s.shape}")
        sd, xd = s.data, x.data
        sv = sd.reshape(())

        def bw(g):
            return g * sv, np.reshape(np.sum(g * xd), sd.shape)

        return record(xd * sv, (x, s), bw)
    factor = x.dtype.type(s)
    return record(x.data * factor, (x,), lambda g: (g * factor,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return record(y, (x,), lambda g: (g * (1 - y * y),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return expit(v)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return record(y, (x,), lambda g: (g * y * (1 - y),))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    return record(np.logaddexp(0, xd).astype(xd.dtype, copy=False), (x,), lambda g: (g * _sigmoid(xd),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


_UNARY = {"tanh": tanh, "logistic-sigmoid": sigmoid, "sigmoid": sigmoid, "softplus": softplus, "relu": relu}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: tanh, logistic-sigmoid, softplus, relu, add, sub, mul, scale."""
    if op in _UNARY:
        return _UNARY[op](*args)
    if op in _BINARY:
        return _BINARY[op](*args)
    if op == "scale":
        return scale(*args)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# structural

def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        ref[axis] = other[axis] = 0
        if other != ref:
            raise ValueError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return record(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[1]:
        raise ValueError(f"channel_slice [{start}:{stop}] out of range for {x.shape[1]} channels")
    shape = x.shape
    dtype = x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[:, start:stop] = g
        return (full,)

    return record(x.data[:, start:stop], (x,), bw)


def batch_scale(x: Tensor, s) -> Tensor:
    """Scale each batch element ``x[b]`` by ``s[b]`` (``s`` shaped ``(B,)``)."""
    s = _as_tensor(s)
    if s.shape != (x.shape[0],):
        raise ValueError(f"batch_scale: factors {s.shape} do not match batch {x.shape[0]}")
    expand = (-1,) + (1,) * (x.ndim - 1)
    sd = s.data.reshape(expand).astype(x.dtype, copy=False)
    xd = x.data

    def bw(g):
        gs = np.sum((g * xd).reshape(xd.shape[0], -1), axis=1) if s.requires_grad else None
        return g * sd, gs

    return record(xd * sd, (x, s), bw)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape, dtype = x.shape, x.dtype
    return record(np.asarray(np.sum(x.data), dtype=dtype), (x,), lambda g: (np.full(shape, g, dtype=dtype),))


def mean(x: Tensor) -> Tensor:
    shape, dtype, n = x.shape, x.dtype, x.size
    return record(np.asarray(np.mean(x.data), dtype=dtype), (x,), lambda g: (np.full(shape, g / n, dtype=dtype),))


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error over all elements; differentiable in both arguments."""
    target = _as_tensor(target)
    _check_same(pred, target, "mse")
    diff = pred.data - target.data.astype(pred.dtype, copy=False)
    n = diff.size

    def bw(g):
        d = (2 / n) * g * diff
        return d, (-d if target.requires_grad else None)

    return record(np.asarray(np.mean(diff * diff), dtype=pred.dtype), (pred, target), bw)


def linear_map(x: Tensor, forward: Callable, adjoint: Callable) -> Tensor:
    """Apply a fixed linear map; its adjoint supplies the backward pass."""
    return record(forward(x.data), (x,), lambda g: (adjoint(g),))


# ---------------------------------------------------------------------------
# convolutions (NCHW, square 3x3 kernels, spatial-same zero padding)

def conv_output_size(size: int, stride: int) -> int:
    return -(-size // stride)


def _pads(size: int, stride: int, k_eff: int) -> tuple[int, int, int]:
    out = conv_output_size(size, stride)
    total = max((out - 1) * stride + k_eff - size, 0)
    return out, total // 2, total - total // 2


def _geometry(h, w, k, stride, dilation):
    k_eff = dilation * (k - 1) + 1
    ho, top, bottom = _pads(h, stride, k_eff)
    wo, left, right = _pads(w, stride, k_eff)
    return ho, wo, (top, bottom), (left, right)


def _im2col(x, k, stride, dilation, ho, wo, ph, pw):
    """Patch matrix ``(B*ho*wo, k*k*C)``; columns ordered (ky, kx, channel)."""
    b, c, h, w = x.shape
    # channel-last padded copy so each patch row gathers contiguous channel runs
    xp = np.zeros((b, h + ph[0] + ph[1], w + pw[0] + pw[1], c), dtype=x.dtype)
    xp[:, ph[0]:ph[0] + h, pw[0]:pw[0] + w, :] = x.transpose(0, 2, 3, 1)
    s0, s1, s2, s3 = xp.strides
    view = as_strided(
        xp,
        shape=(b, ho, wo, k, k, c),
        strides=(s0, s1 * stride, s2 * stride, s1 * dilation, s2 * dilation, s3),
        writeable=False,
    )
    return view.reshape(b * ho * wo, k * k * c)


def _col2im(cols, shape, k, stride, dilation, ho, wo, ph, pw):
    """Adjoint of :func:`_im2col`; returns an NCHW view of channel-last memory."""
    b, c, h, w = shape
    cols = cols.reshape(b, ho, wo, k, k, c)
    out = np.zeros((b, h + ph[0] + ph[1], w + pw[0] + pw[1], c), dtype=cols.dtype)
    for i in range(k):
        r0 = i * dilation
        for j in range(k):
            c0 = j * dilation
            rows = slice(r0, r0 + stride * (ho - 1) + 1, stride)
            out[:, rows, c0:c0 + stride * (wo - 1) + 1:stride, :] += cols[:, :, :, i, j, :]
    return out[:, ph[0]:ph[0] + h, pw[0]:pw[0] + w, :].transpose(0, 3, 1, 2)


def _weight_matrix(w):
    # (O, C, k, k) -> (O, k*k*C) matching the patch column order
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def _weight_from_matrix(mat, shape):
    o, c, k, _ = shape
    return mat.reshape(o, k, k, c).transpose(0, 3, 1, 2)


def _to_rows(y):
    # (B, C, H, W) -> (B*H*W, C)
    return y.transpose(0, 2, 3, 1).reshape(-1, y.shape[1])


def _from_rows(rows, b, h, w):
    return rows.reshape(b, h, w, -1).transpose(0, 3, 1, 2)


def _check_conv_args(x_ch, w, stride, dilation, name):
    if stride < 1 or dilation < 1:
        raise ValueError(f"{name}: stride and dilation must be positive, got {stride}, {dilation}")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ValueError(f"{name}: weights must be out x in x k x k, got {w.shape}")
    if x_ch != w.shape[1]:
        raise ValueError(f"{name}: input has {x_ch} channels, weights expect {w.shape[1]}")


def _conv_input_grad(grows, w, xshape, stride, dilation, geom):
    """Gradient w.r.t. the input of a conv given output gradient rows."""
    b, _, h, wd = xshape
    k = w.shape[2]
    ho, wo, ph, pw = geom
    if stride == 1 and w.shape[0] <= 4 * w.shape[1]:
        # symmetric padding: the adjoint is a 'same' conv with the flipped, transposed kernel
        flipped = _weight_matrix(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gcols = _im2col(_from_rows(grows, b, ho, wo), k, 1, dilation, h, wd, ph, pw)
        return _from_rows(gcols @ flipped.T, b, h, wd)
    return _col2im(grows @ _weight_matrix(w), xshape, k, stride, dilation, ho, wo, ph, pw)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, dilation: int = 1) -> Tensor:
    """Zero-padded 'same' convolution; output extents are ``ceil(H/stride)``."""
    _check_conv_args(x.shape[1], w, stride, dilation, "conv2d")
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"conv2d: bias shape {b.shape} does not match {w.shape[0]} outputs")
    bsz, _, h, wd = x.shape
    k = w.shape[2]
    geom = _geometry(h, wd, k, stride, dilation)
    ho, wo, ph, pw = geom
    cols = _im2col(x.data, k, stride, dilation, ho, wo, ph, pw)
    rows = cols @ _weight_matrix(w.data).T
    if b is not None:
        rows += b.data
    out = _from_rows(rows, bsz, ho, wo)
    xshape = x.shape

    def bw(g):
        grows = _to_rows(g)
        gx = gw = gb = None
        if x.requires_grad:
            gx = _conv_input_grad(grows, w.data, xshape, stride, dilation, geom)
        if w.requires_grad:
            gw = _weight_from_matrix(grows.T @ cols, w.shape)
        if b is not None and b.requires_grad:
            gb = grows.sum(axis=0)
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return record(out, inputs, bw)


def conv2d_transpose(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    output_size: tuple[int, int] | None = None,
    dilation: int = 1,
) -> Tensor:
    """Adjoint of :func:`conv2d` in its input, plus an optional bias.

    ``w`` has the layout of the paired downsampling convolution
    (``out x in x k x k``), so this maps ``w.shape[0]`` channels back to
    ``w.shape[1]`` channels at the original resolution.
    """
    if stride < 1 or dilation < 1:
        raise ValueError(f"conv2d_transpose: stride and dilation must be positive, got {stride}, {dilation}")
    if w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ValueError(f"conv2d_transpose: input has {x.shape[1]} channels, weights expect {w.shape[0]}")
    if b is not None and b.shape != (w.shape[1],):
        raise ValueError(f"conv2d_transpose: bias shape {b.shape} does not match {w.shape[1]} outputs")
    bsz, _, hi, wi = x.shape
    if output_size is None:
        output_size = (hi * stride, wi * stride)
    h, wd = output_size
    k = w.shape[2]
    ho, wo, ph, pw = _geometry(h, wd, k, stride, dilation)
    if (ho, wo) != (hi, wi):
        raise ValueError(
            f"conv2d_transpose: target size {output_size} is inconsistent with input {hi}x{wi} at stride {stride}"
        )
    wmat = _weight_matrix(w.data)
    xrows = _to_rows(x.data)
    out_shape = (bsz, w.shape[1], h, wd)
    out = _col2im(xrows @ wmat, out_shape, k, stride, dilation, ho, wo, ph, pw)
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1)

    def bw(g):
        cols = _im2col(g, k, stride, dilation, ho, wo, ph, pw)
        gx = gw = gb = None
        if x.requires_grad:
            gx = _from_rows(cols @ wmat.T, bsz, ho, wo)
        if w.requires_grad:
            gw = _weight_from_matrix(xrows.T @ cols, w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return record(out, inputs, bw)


# ---------------------------------------------------------------------------
# recurrent cell

def _check_gru(features, state, params):
    w_x, w_h, w_hn = params["w_x"], params["w_h"], params["w_hn"]
    f = state.shape[1]
    if w_x.shape[0] != 3 * f or w_h.shape[:2] != (2 * f, f) or w_hn.shape[:2] != (f, f):
        raise ValueError(f"gru_step: gate weights do not match state width {f}")
    if params["b"].shape != (3 * f,):
        raise ValueError(f"gru_step: bias shape {params['b'].shape} does not match 3 x {f} gates")
    if features.shape[0] != state.shape[0] or features.shape[2:] != state.shape[2:]:
        raise ValueError(f"gru_step: features {features.shape} and state {state.shape} disagree")
    if features.shape[1] != w_x.shape[1]:
        raise ValueError(f"gru_step: features have {features.shape[1]} channels, gates expect {w_x.shape[1]}")


def gru_step(features: Tensor, state: Tensor, params: dict, dilation: int = 1) -> Tensor:
    """One convolutional GRU update, fused into a single graph node.

    ``params`` holds ``w_x`` (3F x Cin x 3 x 3, gates ordered update, reset,
    candidate), ``b`` (3F), ``w_h`` (2F x F x 3 x 3, update and reset) and
    ``w_hn`` (F x F x 3 x 3, candidate).  With ``z, r`` the sigmoid gates the
    new state is ``h + z * (n - h)``, ``n = tanh(Wx x + Whn (r * h) + b)``.
    :func:`gru_step_reference` composes the same cell from primitives.
    """
    _check_gru(features, state, params)
    w_x, b, w_h, w_hn = params["w_x"], params["b"], params["w_h"], params["w_hn"]
    bsz, f, h, wd = state.shape
    geom = _geometry(h, wd, 3, 1, dilation)
    _, _, ph, pw = geom

    cols_x = _im2col(features.data, 3, 1, dilation, h, wd, ph, pw)
    gx = cols_x @ _weight_matrix(w_x.data).T
    gx += b.data
    hd = state.data
    h_rows = _to_rows(hd)
    cols_h = _im2col(hd, 3, 1, dilation, h, wd, ph, pw)
    gh = cols_h @ _weight_matrix(w_h.data).T
    zr = expit(gx[:, :2 * f] + gh)
    z, r = zr[:, :f], zr[:, f:]
    rh = r * h_rows
    cols_rh = _im2col(_from_rows(rh, bsz, h, wd), 3, 1, dilation, h, wd, ph, pw)
    n = np.tanh(gx[:, 2 * f:] + cols_rh @ _weight_matrix(w_hn.data).T)
    new = h_rows + z * (n - h_rows)

    def bw(g):
        g = _to_rows(g)
        d_an = g * z * (1 - n * n)
        d_rh = _conv_input_grad(d_an, w_hn.data, state.shape, 1, dilation, geom)
        d_rh = _to_rows(d_rh)
        d_zr = np.empty_like(zr)
        d_zr[:, :f] = g * (n - h_rows) * z * (1 - z)
        d_zr[:, f:] = d_rh * h_rows * r * (1 - r)
        d_gx = np.concatenate([d_zr, d_an], axis=1)

        g_feat = g_wx = g_b = g_wh = g_whn = g_state = None
        if features.requires_grad:
            g_feat = _conv_input_grad(d_gx, w_x.data, features.shape, 1, dilation, geom)
        if w_x.requires_grad:
            g_wx = _weight_from_matrix(d_gx.T @ cols_x, w_x.shape)
        if b.requires_grad:
            g_b = d_gx.sum(axis=0)
        if w_h.requires_grad:
            g_wh = _weight_from_matrix(d_zr.T @ cols_h, w_h.shape)
        if w_hn.requires_grad:
            g_whn = _weight_from_matrix(d_an.T @ cols_rh, w_hn.shape)
        if state.requires_grad:
            d_h = g * (1 - z) + d_rh * r
            d_h += _to_rows(_conv_input_grad(d_zr, w_h.data, state.shape, 1, dilation, geom))
            g_state = _from_rows(d_h, bsz, h, wd)
        return g_feat, g_state, g_wx, g_b, g_wh, g_whn

    return record(_from_rows(new, bsz, h, wd), (features, state, w_x, b, w_h, w_hn), bw)


def gru_step_reference(features: Tensor, state: Tensor, params: dict, dilation: int = 1) -> Tensor:
    """Unfused GRU cell built from primitive ops (slow; used to cross-check :func:`gru_step`)."""
    _check_gru(features, state, params)
    w_x, b, w_h, w_hn = params["w_x"], params["b"], params["w_h"], params["w_hn"]
    f = state.shape[1]
    gx = conv2d(features, w_x, b, dilation=dilation)
    gh = conv2d(state, w_h, dilation=dilation)
    z = sigmoid(add(channel_slice(gx, 0, f), channel_slice(gh, 0, f)))
    r = sigmoid(add(channel_slice(gx, f, 2 * f), channel_slice(gh, f, 2 * f)))
    n = tanh(add(channel_slice(gx, 2 * f, 3 * f), conv2d(mul(r, state), w_hn, dilation=dilation)))
    return add(state, mul(z, sub(n, state)))
