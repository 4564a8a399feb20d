"""Dense tensors with reverse-mode automatic differentiation.

numpy holds the array data; this module adds the graph bookkeeping needed to
backpropagate through the operator set the distillation networks use:
convolution, dense layers, batch normalization, softmax attention, and the
scalar loss reductions.

Conventions:

* Tensors are treated as immutable once they enter a graph; only ``grad``
  buffers mutate.
* Broadcasting is restricted to singleton-dimension expansion between
  operands of equal rank (e.g. ``[B,1,H,W] * [B,C,H,W]``).  Anything else
  raises :class:`ShapeError`.
* Gradients of leaf tensors accumulate across ``backward()`` calls until
  ``zero_grad()``; interior nodes hold the gradient of the latest call.
* Whether a gradient is routed into an input is decided when the op node is
  created, so freezing a network (clearing ``requires_grad`` on its weights)
  reliably blocks gradient deposits even if the flags are restored before
  ``backward()`` runs.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float64

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


def _coerce_dtype(dtype):
    if dtype is None:
        return None
    dt = np.dtype(dtype)
    if dt not in _FLOAT_DTYPES:
        raise ValueError(f"unsupported dtype {dt}; tensors are float32 or float64")
    return dt


class Tensor:
    """An N-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        dt = _coerce_dtype(dtype)
        arr = np.asarray(data, dtype=dt)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"item() requires a single-element tensor, got shape {self.shape}")

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{flag})"

    # -- graph management ----------------------------------------------------

    def detach(self) -> "Tensor":
        """A view of the same data that is cut out of the graph."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        return out

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate ``grad`` on every tracked leaf reachable from this scalar."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward() called on a tensor that does not require grad")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                node._backward(g, grads)
            if node.requires_grad:
                if node._parents:
                    node.grad = g
                else:
                    node.grad = g if node.grad is None else node.grad + g

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return _scalar_add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return _scalar_mul(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, _scalar_mul(other, -1.0))
        return _scalar_add(self, -other)

    def __rsub__(self, other):
        return _scalar_add(_scalar_mul(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return _scalar_mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not part of the operator set")
        return _scalar_mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A trainable leaf tensor with a dotted-path name unique in its network."""

    __slots__ = ("name",)

    def __init__(self, data, name="", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self):
        return f"Parameter(name={self.name!r}, shape={tuple(self.shape)}, dtype={self.data.dtype})"


# -- node construction ---------------------------------------------------------


def _node(data, parents, grad_fns):
    """Wrap ``data`` as a graph node; route gradients per-parent via ``grad_fns``.

    Routing is frozen at creation time: a parent only receives gradient if it
    required grad when the node was built.
    """
    out = Tensor(data)
    flags = tuple(p.requires_grad for p in parents)
    if any(flags):
        out.requires_grad = True
        out._parents = tuple(parents)
        fns = tuple(grad_fns)

        def _backward(g, grads, _parents=out._parents, _fns=fns, _flags=flags):
            for parent, fn, tracked in zip(_parents, _fns, _flags):
                if tracked and fn is not None:
                    contribution = fn(g)
                    key = id(parent)
                    prev = grads.get(key)
                    grads[key] = contribution if prev is None else prev + contribution

        out._backward = _backward
    return out


def _check_broadcast(sa, sb):
    if len(sa) != len(sb):
        raise ShapeError(
            f"broadcast requires equal rank, got shapes {tuple(sa)} vs {tuple(sb)} "
            "(only singleton dimensions expand)"
        )
    for axis, (m, n) in enumerate(zip(sa, sb)):
        if m != n and m != 1 and n != 1:
            raise ShapeError(
                f"cannot broadcast axis {axis} ({m} vs {n}) between shapes "
                f"{tuple(sa)} and {tuple(sb)}"
            )


def _unbroadcast(g, shape):
    """Sum gradient over the axes that were singleton-expanded in the forward."""
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise and broadcast ops ----------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    return _node(
        a.data + b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with singleton broadcasting."""
    _check_broadcast(a.shape, b.shape)
    return _node(
        a.data * b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.shape),
            lambda g: _unbroadcast(g * a.data, b.shape),
        ),
    )


def _scalar_add(a: Tensor, c) -> Tensor:
    c = float(c)
    return _node(a.data + c, (a,), (lambda g: g,))


def _scalar_mul(a: Tensor, c) -> Tensor:
    c = float(c)
    return _node(a.data * c, (a,), (lambda g: g * c,))


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0.0)
    return _node(y, (x,), (lambda g: g * (y > 0),))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _node(y, (x,), (lambda g: g * y * (1.0 - y),))


def log(x: Tensor) -> Tensor:
    """Natural log; the caller guarantees positive inputs (clamp first)."""
    return _node(np.log(x.data), (x,), (lambda g: g / x.data,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _node(y, (x,), (lambda g: g * y,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip into [lo, hi]; gradient passes only where the value was in range."""
    mask = (x.data >= lo) & (x.data <= hi)
    return _node(np.clip(x.data, lo, hi), (x,), (lambda g: g * mask,))


# -- reductions and reshaping ----------------------------------------------------


def tensor_sum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return np.broadcast_to(g, x.shape).copy()
        gk = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gk, x.shape).copy()

    return _node(y, (x,), (grad_fn,))


def tensor_mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return _scalar_mul(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    return _node(x.data.reshape(shape), (x,), (lambda g: g.reshape(x.shape),))


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries starting at ``start`` along ``axis``."""
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def grad_fn(g):
        out = np.zeros_like(x.data)
        out[index] = g
        return out

    return _node(x.data[index], (x,), (grad_fn,))


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of an empty sequence")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_fn(i):
        lo, hi = offsets[i], offsets[i + 1]

        def grad_fn(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return grad_fn

    return _node(data, tuple(tensors), tuple(make_fn(i) for i in range(len(tensors))))


def global_average_pool(x: Tensor) -> Tensor:
    """Spatial mean of a [B,C,H,W] map, giving [B,C]."""
    if x.ndim != 4:
        raise ShapeError(f"global_average_pool expects [B,C,H,W], got shape {tuple(x.shape)}")
    B, C, H, W = x.shape
    inv = 1.0 / (H * W)
    y = x.data.mean(axis=(2, 3))
    return _node(y, (x,), (lambda g: np.broadcast_to((g * inv)[:, :, None, None], x.shape).copy(),))


def l2_norm_sq(x: Tensor) -> Tensor:
    """Sum of squared entries (a scalar)."""
    y = np.asarray((x.data * x.data).sum(), dtype=x.data.dtype)
    return _node(y, (x,), (lambda g: (2.0 * g) * x.data,))


def l1_norm(x: Tensor) -> Tensor:
    """Sum of absolute entries; subgradient 0 at exact zeros."""
    y = np.asarray(np.abs(x.data).sum(), dtype=x.data.dtype)
    return _node(y, (x,), (lambda g: g * np.sign(x.data),))


def softmax(x: Tensor, axis: int) -> Tensor:
    """Stable softmax along ``axis`` (max-subtracted)."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {tuple(x.shape)}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return y * (g - dot)

    return _node(y, (x,), (grad_fn,))


# -- linear algebra ----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {tuple(a.shape)} @ {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {tuple(a.shape)} @ {tuple(b.shape)}"
        )
    return _node(
        a.data @ b.data,
        (a, b),
        (lambda g: g @ b.data.T, lambda g: a.data.T @ g),
    )


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map: ``x[B,D] @ weight[D,K] + bias[K]``."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"dense expects 2-D input/weight, got {tuple(x.shape)} and {tuple(weight.shape)}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"dense inner dimensions disagree: input {tuple(x.shape)} vs weight {tuple(weight.shape)}"
        )
    y = x.data @ weight.data
    if bias is None:
        return _node(y, (x, weight), (lambda g: g @ weight.data.T, lambda g: x.data.T @ g))
    if bias.shape != (weight.shape[1],):
        raise ShapeError(
            f"dense bias shape {tuple(bias.shape)} does not match output width {weight.shape[1]}"
        )
    return _node(
        y + bias.data[None, :],
        (x, weight, bias),
        (
            lambda g: g @ weight.data.T,
            lambda g: x.data.T @ g,
            lambda g: g.sum(axis=0),
        ),
    )


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of [B,C,H,W] input with a [K,C,kh,kw] kernel.

    Implemented by unrolling kh*kw strided slices into a patch matrix and
    multiplying (one matmul for the forward, two for the backward); the input
    gradient is scattered back with the mirrored slice loop.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(
            f"conv2d expects 4-D input/kernel, got {tuple(x.shape)} and {tuple(kernel.shape)}"
        )
    B, C, H, W = x.shape
    K, Ck, kh, kw = kernel.shape
    if Ck != C:
        raise ShapeError(
            f"conv2d channel mismatch: input has {C} channels, kernel expects {Ck}"
        )
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d padding must be >= 0, got {padding}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ShapeError(
            f"conv2d kernel {kh}x{kw} exceeds padded input {Hp}x{Wp} "
            f"(input {H}x{W}, padding {padding})"
        )
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1

    if padding:
        xp = np.zeros((B, C, Hp, Wp), dtype=x.data.dtype)
        xp[:, :, padding : padding + H, padding : padding + W] = x.data
    else:
        xp = x.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    if stride > 1:
        windows = windows[:, :, ::stride, ::stride]
    cols2d = windows.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    w2d = kernel.data.reshape(K, C * kh * kw)
    out = (cols2d @ w2d.T).reshape(B, Ho, Wo, K).transpose(0, 3, 1, 2)

    def grad_x(g):
        g2d = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, K)
        dcols = (g2d @ w2d).reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        dxp = np.zeros((B, C, Hp, Wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[:, :, i, j]
        if padding:
            return dxp[:, :, padding : padding + H, padding : padding + W].copy()
        return dxp

    def grad_kernel(g):
        g2d = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, K)
        return (g2d.T @ cols2d).reshape(K, C, kh, kw)

    return _node(out, (x, kernel), (grad_x, grad_kernel))


# -- batch normalization -------------------------------------------------------------


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of a [B,C,H,W] map.

    Training mode normalizes by the batch statistics and folds them into the
    running buffers as ``running = momentum*running + (1-momentum)*batch``;
    eval mode normalizes by the running buffers.  The buffers are plain numpy
    arrays mutated in place and never enter the graph.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects [B,C,H,W], got shape {tuple(x.shape)}")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(
            f"batch_norm scale/shift must have shape ({C},), got {tuple(gamma.shape)} and {tuple(beta.shape)}"
        )

    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean = running_mean
        var = running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    n = B * H * W

    def grad_x(g):
        dxhat = g * gamma.data[None, :, None, None]
        if not training:
            return dxhat * inv_std[None, :, None, None]
        sum_dxhat = dxhat.sum(axis=(0, 2, 3))
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3))
        return (inv_std[None, :, None, None] / n) * (
            n * dxhat
            - sum_dxhat[None, :, None, None]
            - xhat * sum_dxhat_xhat[None, :, None, None]
        )

    def grad_gamma(g):
        return (g * xhat).sum(axis=(0, 2, 3))

    def grad_beta(g):
        return g.sum(axis=(0, 2, 3))

    return _node(out, (x, gamma, beta), (grad_x, grad_gamma, grad_beta))


# -- classification losses -------------------------------------------------------------

BCE_EPS = 1e-7


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of [B,C] logits against integer labels."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [B,C] logits, got shape {tuple(logits.shape)}")
    B, C = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (B,):
        raise ShapeError(f"cross_entropy labels must have shape ({B},), got {tuple(labels.shape)}")
    if labels.min() < 0 or labels.max() >= C:
        bad = labels[(labels < 0) | (labels >= C)][0]
        raise ValueError(f"label {int(bad)} out of range [0, {C})")
    labels = labels.astype(np.int64)

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = -log_probs[np.arange(B), labels].mean()

    def grad_fn(g):
        probs = np.exp(log_probs)
        probs[np.arange(B), labels] -= 1.0
        return (float(g) / B) * probs

    return _node(np.asarray(loss, dtype=logits.data.dtype), (logits,), (grad_fn,))


def binary_cross_entropy(probs: Tensor, target) -> Tensor:
    """Mean BCE of probabilities (already through a sigmoid) against 0/1 targets.

    Probabilities are clamped to [BCE_EPS, 1-BCE_EPS] so the result is always
    finite; the gradient is zero where the clamp was active.
    """
    t = np.asarray(target, dtype=probs.data.dtype)
    if t.ndim != 0 and t.shape != probs.shape:
        raise ShapeError(
            f"binary_cross_entropy target shape {tuple(t.shape)} does not match {tuple(probs.shape)}"
        )
    p = np.clip(probs.data, BCE_EPS, 1.0 - BCE_EPS)
    in_range = (probs.data >= BCE_EPS) & (probs.data <= 1.0 - BCE_EPS)
    n = probs.size
    loss = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)).sum() / n

    def grad_fn(g):
        return (float(g) / n) * in_range * (p - t) / (p * (1.0 - p))

    return _node(np.asarray(loss, dtype=probs.data.dtype), (probs,), (grad_fn,))


# -- gradient checking -------------------------------------------------------------


def numeric_gradient(fn, tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar ``fn()`` w.r.t. ``tensor``.

    Temporarily perturbs ``tensor.data`` in place; ``fn`` must rebuild its
    graph on every call.  Use float64 tensors, finite differences are noise
    in single precision.
    """
    flat = tensor.data.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        hi = fn().item()
        flat[i] = saved - h
        lo = fn().item()
        flat[i] = saved
        grad[i] = (hi - lo) / (2.0 * h)
    return grad.reshape(tensor.shape)


def gradient_check(fn, tensors, h: float = 1e-5, atol: float = 1e-7) -> float:
    """Max relative error between analytic and finite-difference gradients.

    ``fn`` evaluates the scalar loss from the given tensors.  Differences
    below ``atol`` count as zero error so that exactly-zero gradients do not
    blow up the relative measure.
    """
    for t in tensors:
        t.zero_grad()
    loss = fn()
    loss.backward()
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        numeric = numeric_gradient(fn, t, h=h)
        diff = np.abs(analytic - numeric)
        scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        rel = np.where(diff <= atol, 0.0, diff / scale)
        worst = max(worst, float(rel.max()))
    return worst
