"""Dense tensors with tape-based reverse-mode automatic differentiation.

The engine is deliberately small: numpy arrays wrapped in a ``Tensor`` that
records a define-by-run tape. Every op that participates in training has a
hand-written backward rule, and all of them are validated against central
finite differences (see ``finite_diff_gradcheck``).

Conventions:
  * convolution is cross-correlation (no kernel flip), zero padding
  * layer normalization acts on the last axis (channel-last)
  * GELU is the exact Gaussian-CDF form, not the tanh approximation
  * a tape and its tensors belong to one logical thread
"""

from __future__ import annotations

import hashlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf, expit

from .errors import ConfigError, ContractError, DimensionError

__all__ = [
    "Tensor",
    "RngStream",
    "no_grad",
    "tensor",
    "zeros",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "clip",
    "reduce_sum",
    "reduce_mean",
    "reshape",
    "permute",
    "narrow",
    "concat",
    "index_last",
    "activation",
    "gelu",
    "silu",
    "sigmoid",
    "relu",
    "softplus",
    "softmax",
    "linear",
    "layer_norm",
    "conv2d",
    "conv1d_depthwise_causal",
    "pool2d",
    "split_channels",
    "concat_channels",
    "salt_pepper_noise",
    "finite_diff_gradcheck",
    "gradcheck_parameters",
]

_SUPPORTED_DTYPES = (np.float32, np.float64)
_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))

_grad_enabled = True


class no_grad:
    """Context manager that suspends tape recording (eval-mode forwards)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """Dense n-dimensional array with optional gradient-tape linkage.

    ``data`` is always a contiguous row-major float32 or float64 array.
    ``grad`` mirrors ``data``'s shape and dtype once populated. Tensors
    produced by ops hold references to their parents plus a backward
    closure; leaves have neither.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        # ascontiguousarray would promote 0-d scalars to 1-d
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def copy_(self, values: np.ndarray) -> None:
        """In-place overwrite of the stored values (optimizer updates)."""
        if values.shape != self.data.shape:
            raise DimensionError(
                f"copy_ shape mismatch: {values.shape} vs {self.data.shape}"
            )
        np.copyto(self.data, values)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        tag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{tag})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _coerce(other, self.dtype))

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _coerce(other, self.dtype))

    def __neg__(self):
        return neg(self)

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Reverse-topological gradient accumulation from a scalar output."""
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar output, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, emitted = stack.pop()
            if emitted:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _coerce(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def _check_same_dtype(*tensors: Tensor) -> None:
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ContractError(
                f"mixed precision operands: {dt.name} vs {t.data.dtype.name}"
            )


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap an op result, attaching tape linkage when tracking is on."""
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data if data.ndim == 0 else np.ascontiguousarray(data)
    out.requires_grad = track
    out.grad = None
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if g.ndim == 0 else np.ascontiguousarray(g)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic --------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    out_data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    out_data = a.data - b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    out_data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    out_data = a.data / b.data

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, -g)

    return _make(-a.data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data)

    return _make(out_data, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(g):
        _accum(a, g * (0.5 / out_data))

    return _make(out_data, (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    out_data = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def backward(g):
        _accum(a, g * inside)

    return _make(out_data, (a,), backward)


# -- reductions and shape ops --------------------------------------------------


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _make(out_data, (a,), backward)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    elif isinstance(axis, int):
        count = a.data.shape[axis]
    else:
        count = int(np.prod([a.data.shape[i] for i in axis]))
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    inv = 1.0 / count

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g * inv, a.data.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g * inv, a.data.shape))

    return _make(out_data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out_data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(out_data, (a,), backward)


def permute(a: Tensor, order) -> Tensor:
    order = tuple(int(i) for i in order)
    if sorted(order) != list(range(a.data.ndim)):
        raise ConfigError(f"invalid axis permutation {order} for rank {a.data.ndim}")
    inverse = tuple(int(i) for i in np.argsort(order))
    out_data = a.data.transpose(order)

    def backward(g):
        _accum(a, g.transpose(inverse))

    return _make(out_data, (a,), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out_data = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        _accum(a, full)

    return _make(out_data, (a,), backward)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    if len(xs) == 0:
        raise ContractError("concat of an empty list")
    _check_same_dtype(*xs)
    out_data = np.concatenate([x.data for x in xs], axis=axis)
    sizes = [x.data.shape[axis] for x in xs]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for x, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            _accum(x, g[tuple(index)])

    return _make(out_data, tuple(xs), backward)


def index_last(a: Tensor, j: int) -> Tensor:
    """Select column ``j`` along the last axis."""
    out_data = a.data[..., j]

    def backward(g):
        full = np.zeros_like(a.data)
        full[..., j] = g
        _accum(a, full)

    return _make(out_data, (a,), backward)


def split_channels(x: Tensor, n: int):
    """Split (B,C,H,W) into ``n`` contiguous channel groups of C/n each."""
    if x.data.ndim != 4:
        raise DimensionError(f"split_channels expects 4-D input, got {x.shape}")
    c = x.data.shape[1]
    if c % n != 0:
        raise ConfigError(f"channel count {c} not divisible by {n}")
    width = c // n
    return tuple(narrow(x, 1, i * width, width) for i in range(n))


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate (B,Ci,H,W) tensors along the channel axis, in list order."""
    if len(xs) == 0:
        raise ContractError("concat_channels of an empty list")
    ref = xs[0].data.shape
    for x in xs:
        if x.data.ndim != 4:
            raise DimensionError(f"concat_channels expects 4-D inputs, got {x.shape}")
        if x.data.shape[0] != ref[0] or x.data.shape[2:] != ref[2:]:
            raise DimensionError(
                f"spatial/batch mismatch in concat_channels: {x.data.shape} vs {ref}"
            )
    return concat(xs, axis=1)


# -- activations ---------------------------------------------------------------


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out_data = x * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        _accum(a, g * (cdf + x * pdf))

    return _make(out_data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    out_data = expit(a.data)

    def backward(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def silu(a: Tensor) -> Tensor:
    s = expit(a.data)
    out_data = a.data * s

    def backward(g):
        _accum(a, g * (s * (1.0 + a.data * (1.0 - s))))

    return _make(out_data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        _accum(a, g * (a.data > 0))

    return _make(out_data, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    out_data = np.logaddexp(0.0, a.data)

    def backward(g):
        _accum(a, g * expit(a.data))

    return _make(out_data, (a,), backward)


_ACTIVATIONS = {"gelu": gelu, "silu": silu, "sigmoid": sigmoid, "relu": relu}


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation kind {kind!r}") from None
    return fn(x)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=-1, keepdims=True)
        _accum(a, (g - inner) * out_data)

    return _make(out_data, (a,), backward)


# -- dense / norm layers ---------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """y = x @ w.T + b over the last axis; leading axes broadcast."""
    _check_same_dtype(x, w)
    fin = x.data.shape[-1]
    fout, w_in = w.data.shape
    if w_in != fin:
        raise DimensionError(f"linear: input width {fin} vs weight width {w_in}")
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, fin)
    y2 = x2 @ w.data.T
    if b is not None:
        if b.data.shape != (fout,):
            raise DimensionError(f"linear: bias shape {b.data.shape} vs ({fout},)")
        y2 = y2 + b.data
    out_data = y2.reshape(lead + (fout,))
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, fout)
        _accum(x, (g2 @ w.data).reshape(x.data.shape))
        _accum(w, g2.T @ x2)
        if b is not None:
            _accum(b, g2.sum(axis=0))

    return _make(out_data, parents, backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    c = x.data.shape[-1]
    if c == 0:
        raise DimensionError("layer_norm over an empty channel axis")
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise DimensionError(
            f"layer_norm affine shapes {gamma.data.shape}/{beta.data.shape} vs ({c},)"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(x, (dxhat - m1 - xhat * m2) * inv)
        axes = tuple(range(g.ndim - 1))
        _accum(gamma, (g * xhat).sum(axis=axes))
        _accum(beta, g.sum(axis=axes))

    return _make(out_data, (x, gamma, beta), backward)


# -- convolutions -----------------------------------------------------------------


def _col_view(xp: np.ndarray, groups: int, cpg: int, kh: int, kw: int,
              ho: int, wo: int, stride: int) -> np.ndarray:
    """Strided (B, G, Cg, kh, kw, Ho, Wo) window view over padded input."""
    b = xp.shape[0]
    sb, sc, sh, sw = xp.strides
    shape = (b, groups, cpg, kh, kw, ho, wo)
    strides = (sb, sc * cpg, sc, sh, sw, sh * stride, sw * stride)
    return np.lib.stride_tricks.as_strided(xp, shape, strides, writeable=False)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """2-D grouped cross-correlation with zero padding.

    x: (B, Cin, H, W); w: (Cout, Cin/groups, kh, kw); b: (Cout,) optional.
    Output spatial size is floor((H + 2*padding - kh)/stride) + 1.
    """
    _check_same_dtype(x, w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4-D input/weight, got {x.shape}/{w.shape}"
        )
    if padding < 0 or stride < 1:
        raise ConfigError(f"invalid stride/padding ({stride}, {padding})")
    bsz, cin, h, wd = x.data.shape
    cout, cpg, kh, kw = w.data.shape
    if cin % groups != 0 or cout % groups != 0:
        raise ConfigError(f"groups={groups} does not divide Cin={cin}/Cout={cout}")
    if cpg != cin // groups:
        raise DimensionError(
            f"weight expects {cpg} channels per group, input provides {cin // groups}"
        )
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"kernel ({kh}x{kw}) too large for padded input ({h}x{wd}, pad {padding})"
        )
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _col_view(xp, groups, cpg, kh, kw, ho, wo, stride)
    wg = w.data.reshape(groups, cout // groups, cpg, kh, kw)
    out = np.einsum("bgcuvhw,gocuv->bgohw", cols, wg, optimize=True)
    out = out.reshape(bsz, cout, ho, wo)
    if b is not None:
        if b.data.shape != (cout,):
            raise DimensionError(f"conv2d bias shape {b.data.shape} vs ({cout},)")
        out = out + b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gg = g.reshape(bsz, groups, cout // groups, ho, wo)
        _accum(w, np.einsum("bgcuvhw,bgohw->gocuv", cols, gg,
                            optimize=True).reshape(w.data.shape))
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            dxpg = dxp.reshape(bsz, groups, cpg, *xp.shape[2:])
            for u in range(kh):
                for v in range(kw):
                    patch = np.einsum("goc,bgohw->bgchw", wg[:, :, :, u, v], gg,
                                      optimize=True)
                    dxpg[:, :, :, u:u + stride * ho:stride,
                         v:v + stride * wo:stride] += patch
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + wd]
            _accum(x, dxp)

    return _make(out, parents, backward)


def conv1d_depthwise_causal(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Per-channel causal 1-D convolution over the sequence axis.

    x: (B, L, E); w: (E, k). Position t sees inputs t-k+1 .. t only
    (left zero padding); w[:, -1] is the tap on the current step.
    """
    _check_same_dtype(x, w)
    if x.data.ndim != 3 or w.data.ndim != 2:
        raise DimensionError(f"conv1d expects (B,L,E)/(E,k), got {x.shape}/{w.shape}")
    bsz, length, e = x.data.shape
    ew, k = w.data.shape
    if ew != e:
        raise DimensionError(f"conv1d channel mismatch: {ew} vs {e}")
    xp = np.pad(x.data, ((0, 0), (k - 1, 0), (0, 0)))
    out = np.zeros_like(x.data)
    for j in range(k):
        out += xp[:, j:j + length, :] * w.data[:, j]
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        dw = np.empty_like(w.data)
        for j in range(k):
            dw[:, j] = (g * xp[:, j:j + length, :]).sum(axis=(0, 1))
        _accum(w, dw)
        if b is not None:
            _accum(b, g.sum(axis=(0, 1)))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for j in range(k):
                dxp[:, j:j + length, :] += g * w.data[:, j]
            _accum(x, dxp[:, k - 1:, :])

    return _make(out, parents, backward)


# -- pooling ----------------------------------------------------------------------


def _adaptive_bins(size: int, out: int):
    # bin i covers [floor(i*size/out), ceil((i+1)*size/out))
    return [(int(np.floor(i * size / out)), int(np.ceil((i + 1) * size / out)))
            for i in range(out)]


def pool2d(kind: str, x: Tensor, out_hw: Optional[tuple] = None) -> Tensor:
    """Pooling over (B,C,H,W) inputs.

    kinds: adaptive_avg (to out_hw, standard unequal-bin rule), global_avg
    (alias for adaptive_avg to 1x1), channelwise_max_over_C and
    channelwise_avg_over_C (reduce the C axis to 1).
    """
    if x.data.ndim != 4:
        raise DimensionError(f"pool2d expects 4-D input, got {x.shape}")
    bsz, c, h, wd = x.data.shape

    if kind == "global_avg" or (kind == "adaptive_avg" and tuple(out_hw or (1, 1)) == (1, 1)):
        out_data = x.data.mean(axis=(2, 3), keepdims=True)
        scale = 1.0 / (h * wd)

        def backward(g):
            _accum(x, np.broadcast_to(g * scale, x.data.shape))

        return _make(out_data, (x,), backward)

    if kind == "adaptive_avg":
        oh, ow = int(out_hw[0]), int(out_hw[1])
        if oh > h or ow > wd:
            raise ConfigError(f"adaptive_avg output {oh}x{ow} exceeds input {h}x{wd}")
        hbins = _adaptive_bins(h, oh)
        wbins = _adaptive_bins(wd, ow)
        out_data = np.empty((bsz, c, oh, ow), dtype=x.data.dtype)
        for i, (h0, h1) in enumerate(hbins):
            for j, (w0, w1) in enumerate(wbins):
                out_data[:, :, i, j] = x.data[:, :, h0:h1, w0:w1].mean(axis=(2, 3))

        def backward(g):
            dx = np.zeros_like(x.data)
            for i, (h0, h1) in enumerate(hbins):
                for j, (w0, w1) in enumerate(wbins):
                    area = (h1 - h0) * (w1 - w0)
                    dx[:, :, h0:h1, w0:w1] += g[:, :, i:i + 1, j:j + 1] / area
            _accum(x, dx)

        return _make(out_data, (x,), backward)

    if kind == "channelwise_max_over_C":
        out_data = x.data.max(axis=1, keepdims=True)
        argmax = x.data.argmax(axis=1)

        def backward(g):
            dx = np.zeros_like(x.data)
            bi, hi, wi = np.ogrid[:bsz, :h, :wd]
            dx[bi, argmax, hi, wi] = g[:, 0]
            _accum(x, dx)

        return _make(out_data, (x,), backward)

    if kind == "channelwise_avg_over_C":
        out_data = x.data.mean(axis=1, keepdims=True)
        scale = 1.0 / c

        def backward(g):
            _accum(x, np.broadcast_to(g * scale, x.data.shape))

        return _make(out_data, (x,), backward)

    raise ConfigError(f"unknown pooling kind {kind!r}")


def salt_pepper_noise(x: Tensor, p_salt: float, p_pepper: float,
                      rng: "RngStream") -> Tensor:
    """Independently replace elements with their per-channel max (salt,
    prob p_salt) or min (pepper, prob p_pepper) over each sample's (H,W)
    extent. Replaced elements receive no gradient; the rest pass through.
    """
    if p_salt < 0 or p_pepper < 0 or p_salt + p_pepper > 1.0:
        raise ConfigError(
            f"invalid noise probabilities salt={p_salt} pepper={p_pepper}"
        )
    if x.data.ndim != 4:
        raise DimensionError(f"salt_pepper_noise expects (B,C,H,W), got {x.shape}")
    if p_salt == 0.0 and p_pepper == 0.0:
        return x
    u = rng.uniform(x.data.shape)
    salt = u < p_salt
    pepper = (u >= p_salt) & (u < p_salt + p_pepper)
    keep = ~(salt | pepper)
    cmax = x.data.max(axis=(2, 3), keepdims=True)
    cmin = x.data.min(axis=(2, 3), keepdims=True)
    out = np.where(salt, cmax, np.where(pepper, cmin, x.data))

    def backward(g):
        _accum(x, g * keep)

    return _make(out, (x,), backward)


# -- deterministic RNG --------------------------------------------------------------


def _mix_tag(seed: int, tag: str) -> int:
    digest = hashlib.blake2b(
        seed.to_bytes(8, "little") + tag.encode("utf-8"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little")


class RngStream:
    """Counter-based PRNG: Philox4x64 keyed by (seed, draw index).

    Each draw uses its own Philox sub-stream, so a stream's state is fully
    described by ``(seed, draws)`` and replays identically on any platform.
    """

    ALGORITHM = "philox4x64"

    def __init__(self, seed: int, draws: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.draws = int(draws)

    def _generator(self) -> np.random.Generator:
        key = self.seed | (self.draws << 64)
        self.draws += 1
        return np.random.Generator(np.random.Philox(key=key))

    def normal(self, shape=(), scale: float = 1.0, dtype=np.float64) -> np.ndarray:
        return (self._generator().standard_normal(shape) * scale).astype(dtype)

    def uniform(self, shape=(), dtype=np.float64) -> np.ndarray:
        return self._generator().random(shape).astype(dtype)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._generator().integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator().permutation(n)

    def child(self, tag: str) -> "RngStream":
        """Derive an independent stream named by ``tag``."""
        return RngStream(_mix_tag(self.seed, tag))

    def state(self) -> tuple:
        return (self.seed, self.draws)


# -- gradient checking ----------------------------------------------------------


def finite_diff_gradcheck(f: Callable[[Tensor], Tensor], x: Tensor,
                          h: float = 1e-5, return_errors: bool = False):
    """Max relative error between tape gradients and central differences.

    ``f`` maps a tensor to a scalar Tensor and must be smooth at ``x``
    (kinked inputs such as relu at 0 are excluded by contract). Run in
    64-bit; the relative error denominator is max(|a|, |n|, 1e-8).
    With ``return_errors`` the per-coordinate error array comes back
    instead of its max.
    """
    if x.data.dtype != np.float64:
        raise ContractError("finite_diff_gradcheck requires a float64 input")
    x.zero_grad()
    out = f(x)
    out.backward()
    analytic = x.grad.copy()
    numeric = np.empty_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
            flat[i] = orig
            num_flat[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    errors = np.abs(analytic - numeric) / denom
    if return_errors:
        return errors
    return float(errors.max())


def gradcheck_parameters(f: Callable[[], Tensor], params: Iterable[Tensor],
                         h=1e-5) -> float:
    """finite_diff_gradcheck over several leaves of a zero-arg scalar function.

    ``h`` may be a sequence of steps: a coordinate then scores its best
    (smallest) error over the grid, since truncation-dominated and
    roundoff-dominated coordinates want opposite step sizes. The tape
    gradient being checked is the same for every step.
    """
    steps = (h,) if np.isscalar(h) else tuple(h)
    worst = 0.0
    for p in params:
        per_step = [finite_diff_gradcheck(lambda _p: f(), p, h=s,
                                          return_errors=True)
                    for s in steps]
        best = np.minimum.reduce(per_step)
        worst = max(worst, float(best.max()))
    return worst
