"""Dense N-d arrays with reverse-mode automatic differentiation.

Everything downstream (transforms, attention, entropy models, losses) is
built from the primitives in this module.  Arrays are numpy-backed; float32
is the working precision, float64 is used for gradient checking.  The tape
is implicit: every operation records its parents and a backward closure on
the output tensor, and ``backward()`` replays the graph in reverse
topological order exactly once per node.

Broadcasting is supported for elementwise ops (gradients are reduced back
to the operand shapes), but the codebase only relies on bias-add patterns
and scalars.
"""

import numpy as np
from scipy import special as _sp

DEFAULT_DTYPE = np.float32


class Tensor:
    """An N-d array that can participate in reverse-mode differentiation.

    ``grad`` is populated by ``backward()`` for every tensor in the graph
    that has ``requires_grad`` set; repeated backward calls accumulate.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None
        self._op = "leaf"

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data, parents, backward_fn, op):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        else:
            out._parents = ()
            out._backward_fn = None
        out._op = op
        return out

    # -- basic introspection ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(constant_like(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- reverse pass ------------------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(node) into ``grad`` for the whole graph.

        ``self`` must be a scalar (size 1).  Each call adds a fresh pass'
        gradients on top of whatever is already stored, so zero grads
        between optimization steps.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        order = _topo_order(self)
        flowing = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = g.copy() if node._backward_fn is None else g
                else:
                    node.grad = node.grad + g
            if node._backward_fn is None:
                continue
            for parent, pg in zip(node._parents, node._backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in flowing:
                    flowing[key] = flowing[key] + pg
                else:
                    flowing[key] = pg


def _topo_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def constant_like(value, ref):
    return Tensor(np.asarray(value, dtype=ref.data.dtype))


def _coerce(x, ref):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.data.dtype))


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a)

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor._from_op(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a)

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return Tensor._from_op(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a)

    def bw(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return Tensor._from_op(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a)

    def bw(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return Tensor._from_op(a.data / b.data, (a, b), bw, "div")


def neg(a):
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def square(a):
    def bw(g):
        return (2.0 * a.data * g,)

    return Tensor._from_op(a.data * a.data, (a,), bw, "square")


def absolute(a):
    def bw(g):
        return (g * np.sign(a.data),)

    return Tensor._from_op(np.abs(a.data), (a,), bw, "abs")


def log(a):
    def bw(g):
        return (g / a.data,)

    return Tensor._from_op(np.log(a.data), (a,), bw, "log")


def exp(a):
    out_data = np.exp(a.data)

    def bw(g):
        return (g * out_data,)

    return Tensor._from_op(out_data, (a,), bw, "exp")


def sqrt(a):
    out_data = np.sqrt(a.data)

    def bw(g):
        return (g * 0.5 / out_data,)

    return Tensor._from_op(out_data, (a,), bw, "sqrt")


def tanh(a):
    out_data = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - out_data * out_data),)

    return Tensor._from_op(out_data, (a,), bw, "tanh")


def sigmoid(a):
    out_data = _stable_sigmoid(a.data)

    def bw(g):
        return (g * out_data * (1.0 - out_data),)

    return Tensor._from_op(out_data, (a,), bw, "sigmoid")


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a):
    # log(1 + e^x), stable for large |x|
    out_data = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))

    def bw(g):
        return (g * _stable_sigmoid(a.data),)

    return Tensor._from_op(out_data, (a,), bw, "softplus")


_TWO_OVER_SQRT_PI = float(2.0 / np.sqrt(np.pi))


def erf(a):
    def bw(g):
        return (g * _TWO_OVER_SQRT_PI * np.exp(-a.data * a.data),)

    return Tensor._from_op(_sp.erf(a.data), (a,), bw, "erf")


def leaky_relu(a, slope=0.01):
    factor = np.where(a.data >= 0, 1.0, slope).astype(a.data.dtype)

    def bw(g):
        return (g * factor,)

    return Tensor._from_op(a.data * factor, (a,), bw, "leaky_relu")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a):
    """tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))

    def bw(g):
        dinner = _GELU_C * (1.0 + 0.134145 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return Tensor._from_op(0.5 * x * (1.0 + t), (a,), bw, "gelu")


def clamp_min(a, floor):
    """max(a, floor); gradient passes only where a > floor."""
    mask = (a.data > floor).astype(a.data.dtype)

    def bw(g):
        return (g * mask,)

    return Tensor._from_op(np.maximum(a.data, floor), (a,), bw, "clamp_min")


def round_ties_away(a):
    """Nearest-integer rounding, ties away from zero, straight-through grad."""
    out_data = np.sign(a.data) * np.floor(np.abs(a.data) + 0.5)

    def bw(g):
        return (g,)

    return Tensor._from_op(out_data, (a,), bw, "round_ste")


# -- reductions -----------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=True),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).astype(a.data.dtype, copy=True),)

    return Tensor._from_op(out_data, (a,), bw, "sum")


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- shape manipulation -----------------------------------------------------------


def reshape(a, shape):
    def bw(g):
        return (g.reshape(a.data.shape),)

    return Tensor._from_op(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inv),)

    return Tensor._from_op(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), bw, "transpose")


def concat(tensors, axis):
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def narrow(a, axis, start, length):
    """Contiguous slice along one axis (the building block of split)."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return Tensor._from_op(np.ascontiguousarray(a.data[idx]), (a,), bw, "narrow")


def split(a, sections, axis):
    """Split into equal parts (int) or by explicit sizes (list)."""
    n = a.data.shape[axis]
    if isinstance(sections, int):
        if n % sections:
            raise ValueError(f"cannot split axis of {n} into {sections} equal parts")
        sizes = [n // sections] * sections
    else:
        sizes = list(sections)
        if sum(sizes) != n:
            raise ValueError(f"split sizes {sizes} do not cover axis of {n}")
    out = []
    start = 0
    for s in sizes:
        out.append(narrow(a, axis, start, s))
        start += s
    return out


def pad(a, pad_width):
    """Zero padding; ``pad_width`` follows np.pad's ((before, after), ...) form."""
    pad_width = tuple(tuple(p) for p in pad_width)
    idx = tuple(slice(b, b + s) for (b, _), s in zip(pad_width, a.data.shape))

    def bw(g):
        return (np.ascontiguousarray(g[idx]),)

    return Tensor._from_op(np.pad(a.data, pad_width), (a,), bw, "pad")


def roll2d(a, shift_h, shift_w, axes=(1, 2)):
    """Cyclic shift along two axes; backward rolls the other way."""
    shifts = (shift_h, shift_w)

    def bw(g):
        return (np.roll(g, (-shift_h, -shift_w), axis=axes),)

    return Tensor._from_op(np.roll(a.data, shifts, axis=axes), (a,), bw, "roll2d")


# -- linear algebra -----------------------------------------------------------------


def matmul(a, b):
    """Batched matrix product with standard numpy stacking semantics."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a)
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul: inner dims disagree {a.data.shape} @ {b.data.shape}")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data @ b.data, (a, b), bw, "matmul")


def softmax(a):
    """Softmax over the last axis, with per-row max subtraction."""
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        return (out_data * (g - dot),)

    return Tensor._from_op(out_data, (a,), bw, "softmax")


def layer_norm(a, gamma, beta, eps=1e-5):
    """Layer normalization over the last axis with affine parameters."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gamma.data + beta.data

    def bw(g):
        gg = g * gamma.data
        gmean = gg.mean(axis=-1, keepdims=True)
        gxhat = (gg * xhat).mean(axis=-1, keepdims=True)
        dx = ((gg - gmean - xhat * gxhat) * inv).astype(x.dtype) if a.requires_grad else None
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead).reshape(gamma.data.shape) if gamma.requires_grad else None
        dbeta = g.sum(axis=lead).reshape(beta.data.shape) if beta.requires_grad else None
        return dx, dgamma, dbeta

    return Tensor._from_op(out_data, (a, gamma, beta), bw, "layer_norm")


# -- spatial ops (NCHW) ------------------------------------------------------------------


def _patches(xp, k, stride):
    """View of all k x k windows: (B, C, Ho, Wo, k, k)."""
    B, C, H, W = xp.shape
    Ho = (H - k) // stride + 1
    Wo = (W - k) // stride + 1
    sB, sC, sH, sW = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, (B, C, Ho, Wo, k, k), (sB, sC, sH * stride, sW * stride, sH, sW), writeable=False
    )


def _conv_forward(x, w, stride, padding):
    B, C, H, W = x.shape
    O, Ci, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    P = _patches(xp, k, stride)
    Ho, Wo = P.shape[2], P.shape[3]
    cols = P.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
    out = cols @ w.reshape(O, -1).T
    return np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))


def _conv_grad_input(dout, w, stride, padding, in_shape):
    B, C, H, W = in_shape
    O, _, k, _ = w.shape
    Hp, Wp = H + 2 * padding, W + 2 * padding
    _, _, Ho, Wo = dout.shape
    dflat = dout.transpose(0, 2, 3, 1).reshape(-1, O)
    # one fused matmul, then scatter; channel-last keeps the writes contiguous
    dcols = (dflat @ w.reshape(O, -1)).reshape(B, Ho, Wo, C, k, k)
    acc = np.zeros((B, Hp, Wp, C), dtype=dout.dtype)
    for u in range(k):
        for v in range(k):
            acc[:, u : u + stride * Ho : stride, v : v + stride * Wo : stride, :] += dcols[..., u, v]
    dxp = np.ascontiguousarray(acc.transpose(0, 3, 1, 2))
    if padding:
        return np.ascontiguousarray(dxp[:, :, padding : Hp - padding, padding : Wp - padding])
    return dxp


def _conv_grad_weight(dout, x, stride, padding, w_shape):
    O, C, k, _ = w_shape
    B = x.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    P = _patches(xp, k, stride)
    Ho, Wo = P.shape[2], P.shape[3]
    cols = P.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
    dflat = dout.transpose(0, 2, 3, 1).reshape(-1, O)
    return (dflat.T @ cols).reshape(O, C, k, k)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-d convolution: input (B, C, H, W), weight (O, C, k, k), bias (O,)."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError("conv2d expects 4-d input and weight")
    B, C, H, W = x.data.shape
    O, Ci, k, k2 = weight.data.shape
    if k != k2:
        raise ValueError("conv2d supports square kernels only")
    if Ci != C:
        raise ValueError(f"conv2d: input has {C} channels but weight expects {Ci} (weight {weight.data.shape})")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    if H + 2 * padding < k or W + 2 * padding < k:
        raise ValueError(f"conv2d: spatial extent {H}x{W} (+2*{padding} pad) smaller than kernel {k}")
    out_data = _conv_forward(x.data, weight.data, stride, padding)
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, O, 1, 1)
        parents = (x, weight, bias)
    else:
        parents = (x, weight)

    def bw(g):
        dx = _conv_grad_input(g, weight.data, stride, padding, x.data.shape) if x.requires_grad else None
        dw = _conv_grad_weight(g, x.data, stride, padding, weight.data.shape) if weight.requires_grad else None
        if bias is not None:
            db = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
            return dx, dw, db
        return dx, dw

    return Tensor._from_op(out_data, parents, bw, "conv2d")


def deconv2d(x, weight, bias=None, stride=1, padding=0):
    """Transposed convolution, the adjoint of conv2d with the same geometry.

    Input (B, C_in, H, W), weight (C_in, C_out, k, k), output spatial extent
    (H - 1) * stride - 2 * padding + k.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError("deconv2d expects 4-d input and weight")
    B, C, H, W = x.data.shape
    Ci, O, k, k2 = weight.data.shape
    if k != k2:
        raise ValueError("deconv2d supports square kernels only")
    if Ci != C:
        raise ValueError(f"deconv2d: input has {C} channels but weight expects {Ci} (weight {weight.data.shape})")
    if stride < 1:
        raise ValueError("deconv2d: stride must be >= 1")
    Ho = (H - 1) * stride - 2 * padding + k
    Wo = (W - 1) * stride - 2 * padding + k
    out_data = _conv_grad_input(x.data, weight.data, stride, padding, (B, O, Ho, Wo))
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, O, 1, 1)
        parents = (x, weight, bias)
    else:
        parents = (x, weight)

    def bw(g):
        dx = _conv_forward(g, weight.data, stride, padding) if x.requires_grad else None
        dw = _conv_grad_weight(x.data, g, stride, padding, weight.data.shape) if weight.requires_grad else None
        if bias is not None:
            db = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
            return dx, dw, db
        return dx, dw

    return Tensor._from_op(out_data, parents, bw, "deconv2d")


def maxpool2d(x, kernel, stride, padding=0):
    """Max pooling with -inf fill, so padded cells never win.

    Backward routes the gradient to the argmax cell, first occurrence in
    row-major window order on ties.
    """
    if kernel < 1:
        raise ValueError("maxpool2d: kernel must be >= 1")
    B, C, H, W = x.data.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf)
    P = _patches(xp, kernel, stride)
    Ho, Wo = P.shape[2], P.shape[3]
    flat = P.reshape(B, C, Ho, Wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    Hp, Wp = xp.shape[2], xp.shape[3]

    def bw(g):
        ky, kx = np.divmod(arg, kernel)
        oi = np.arange(Ho)[None, None, :, None]
        oj = np.arange(Wo)[None, None, None, :]
        plane = np.arange(B * C).reshape(B, C, 1, 1)
        flat = (plane * Hp + oi * stride + ky) * Wp + oj * stride + kx
        dxp = np.bincount(flat.ravel(), weights=g.ravel(), minlength=B * C * Hp * Wp)
        dxp = dxp.reshape(B, C, Hp, Wp).astype(g.dtype)
        if padding:
            return (np.ascontiguousarray(dxp[:, :, padding : Hp - padding, padding : Wp - padding]),)
        return (dxp,)

    return Tensor._from_op(np.ascontiguousarray(out_data), (x,), bw, "maxpool2d")


def batchnorm2d(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel batch normalization on NCHW input.

    In training mode the batch statistics are used (and ``running_*`` arrays
    are updated in place); in eval mode the stored statistics are used.
    """
    C = x.data.shape[1]
    gshape = (1, C, 1, 1)
    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(gshape)) * inv.reshape(gshape)
        out_data = xhat * gamma.data.reshape(gshape) + beta.data.reshape(gshape)
        n = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]

        def bw(g):
            gg = g * gamma.data.reshape(gshape)
            sum_gg = gg.sum(axis=(0, 2, 3))
            sum_gg_xhat = (gg * xhat).sum(axis=(0, 2, 3))
            dx = inv.reshape(gshape) * (
                gg - (sum_gg / n).reshape(gshape) - xhat * (sum_gg_xhat / n).reshape(gshape)
            )
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            return dx.astype(x.data.dtype), dgamma, dbeta

        return Tensor._from_op(out_data, (x, gamma, beta), bw, "batchnorm2d")

    inv = 1.0 / np.sqrt(running_var + eps)
    scale = (gamma.data * inv).reshape(gshape)
    shift = (beta.data - gamma.data * running_mean * inv).reshape(gshape)
    out_data = x.data * scale + shift

    def bw_eval(g):
        dgamma = (g * (x.data - running_mean.reshape(gshape)) * inv.reshape(gshape)).sum(axis=(0, 2, 3))
        return g * scale, dgamma, g.sum(axis=(0, 2, 3))

    return Tensor._from_op(out_data, (x, gamma, beta), bw_eval, "batchnorm2d_eval")


# -- finite-difference oracle -----------------------------------------------------------


def numeric_gradient(fn, wrt, eps=1e-4, indices=None):
    """Central finite differences of scalar ``fn()`` w.r.t. tensor ``wrt``.

    Independent of the tape: only mutates ``wrt.data`` between plain forward
    evaluations.  ``indices`` restricts the check to a list of flat indices
    (all elements when None).
    """
    flat = wrt.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = np.zeros(flat.size, dtype=np.float64)
    for i in indices:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(fn())
        flat[i] = orig - eps
        fm = float(fn())
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * eps)
    return out.reshape(wrt.data.shape)


def check_gradients(fn, wrt, eps=1e-4, indices=None):
    """Max relative error between tape gradients and finite differences.

    Runs one forward/backward to fill ``wrt.grad``, then compares against
    :func:`numeric_gradient` on ``indices`` (all elements when None).
    Relative error uses max(|analytic|, |numeric|, 1) as denominator.
    """
    for t in wrt:
        t.zero_grad()
    loss = fn()
    loss.backward()
    worst = 0.0
    for t in wrt:
        sel = None if indices is None else [i for i in indices if i < t.data.size]
        num = numeric_gradient(lambda: fn().item(), t, eps=eps, indices=sel)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        if sel is not None:
            num_f = num.reshape(-1)[sel]
            ana_f = np.asarray(ana, dtype=np.float64).reshape(-1)[sel]
        else:
            num_f = num.reshape(-1)
            ana_f = np.asarray(ana, dtype=np.float64).reshape(-1)
        if not num_f.size:
            continue
        denom = np.maximum(np.maximum(np.abs(num_f), np.abs(ana_f)), 1.0)
        worst = max(worst, float((np.abs(num_f - ana_f) / denom).max()))
    return worst
