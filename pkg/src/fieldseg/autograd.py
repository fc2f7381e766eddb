"""Minimal reverse-mode autodiff over dense numpy arrays.

Only the ops the models need: strided 3x3x3 convolution, linear layers,
ReLU, row softmax, cross-entropy, soft Dice loss, trilinear sampling of a
feature volume, concatenation, and scalar arithmetic for loss weighting.
Gradients accumulate into ``.grad`` buffers; ``backward()`` runs the tape
in reverse topological order.
"""

import numpy as np

from .volume import trilinear_blend, trilinear_flat_corners


class Tensor:
    """Array value with an optional gradient buffer and a backward closure."""

    def __init__(self, data, parents=(), backward=None, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in self._parents
        )

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def ensure_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def accumulate(self, g):
        if self.requires_grad:
            self.ensure_grad()
            self.grad += g

    def backward(self):
        """Backpropagate from a scalar output through the whole tape."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    def __add__(self, other):
        if not isinstance(other, Tensor):
            raise TypeError("Tensor addition requires another Tensor")
        if self.shape != other.shape:
            raise ValueError(f"shape mismatch in add: {self.shape} vs {other.shape}")
        a, b = self, other

        def bw(g):
            a.accumulate(g)
            b.accumulate(g)

        return Tensor(a.data + b.data, (a, b), bw)

    def __mul__(self, scalar):
        s = float(scalar)
        a = self

        def bw(g):
            a.accumulate(g * s)

        return Tensor(a.data * s, (a,), bw)

    __rmul__ = __mul__


class Parameter(Tensor):
    """Trainable tensor carrying persistent Adam moment buffers."""

    def __init__(self, data, name=""):
        super().__init__(np.array(data), requires_grad=True)
        self.name = name
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0


def constant(data):
    return Tensor(np.asarray(data))


def relu(x):
    mask = x.data > 0

    def bw(g):
        x.accumulate(g * mask)

    return Tensor(np.where(mask, x.data, 0), (x,), bw)


def linear(x, w, b):
    """Affine map: (n, f_in) @ (f_in, f_out) + (f_out,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ValueError(
            f"linear expects 2D input/weights and 1D bias, got "
            f"{x.shape}/{w.shape}/{b.shape}"
        )
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch in linear: {x.shape} @ {w.shape} + {b.shape}")

    def bw(g):
        if x.requires_grad:
            x.accumulate(g @ w.data.T)
        if w.requires_grad:
            w.accumulate(x.data.T @ g)
        if b.requires_grad:
            b.accumulate(g.sum(axis=0))

    return Tensor(x.data @ w.data + b.data, (x, w, b), bw)


def conv3d(x, w, b, stride=1):
    """3x3x3 cross-correlation with zero-padding 1 and stride 1 or 2.

    Output spatial extent is ceil(n / stride) per axis.
    """
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if x.data.ndim != 4:
        raise ValueError(f"conv3d input must be (c,d,h,w), got {x.shape}")
    if w.data.ndim != 5 or w.shape[2:] != (3, 3, 3):
        raise ValueError(f"conv3d kernel must be (c_out,c_in,3,3,3), got {w.shape}")
    c_in, d, h, wd = x.shape
    c_out = w.shape[0]
    if w.shape[1] != c_in:
        raise ValueError(f"kernel expects {w.shape[1]} input channels, input has {c_in}")
    if b.shape != (c_out,):
        raise ValueError(f"bias shape {b.shape} does not match {c_out} output channels")

    od, oh, ow = (-(-d // stride), -(-h // stride), -(-wd // stride))
    pad = np.zeros((c_in, d + 2, h + 2, wd + 2), dtype=x.data.dtype)
    pad[:, 1:-1, 1:-1, 1:-1] = x.data
    sc, sd, sh, sw = pad.strides
    view = np.lib.stride_tricks.as_strided(
        pad, shape=(c_in, 3, 3, 3, od, oh, ow),
        strides=(sc, sd, sh, sw, sd * stride, sh * stride, sw * stride))
    cols = view.reshape(c_in * 27, od * oh * ow)  # copies; pad can be dropped
    w2 = w.data.reshape(c_out, c_in * 27)
    out = (w2 @ cols + b.data[:, None]).reshape(c_out, od, oh, ow)

    def bw(g):
        g2 = g.reshape(c_out, -1)
        if b.requires_grad:
            b.accumulate(g2.sum(axis=1))
        if w.requires_grad:
            w.accumulate((g2 @ cols.T).reshape(w.shape))
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(c_in, 3, 3, 3, od, oh, ow)
            gpad = np.zeros((c_in, d + 2, h + 2, wd + 2), dtype=g.dtype)
            for kd in range(3):
                for kh in range(3):
                    for kw in range(3):
                        gpad[:, kd:kd + stride * od:stride,
                             kh:kh + stride * oh:stride,
                             kw:kw + stride * ow:stride] += dcols[:, kd, kh, kw]
            x.accumulate(gpad[:, 1:-1, 1:-1, 1:-1])

    return Tensor(out, (x, w, b), bw)


def concat(tensors, axis=1):
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of an empty list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    spans = np.cumsum([t.shape[axis] for t in tensors])

    def bw(g):
        start = 0
        for t, stop in zip(tensors, spans):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, stop)
                t.accumulate(g[tuple(idx)])
            start = stop

    return Tensor(data, tuple(tensors), bw)


def softmax_rows(logits):
    """Row-wise softmax with max subtraction; rows sum to 1."""
    if logits.data.ndim != 2 or logits.shape[1] < 2:
        raise ValueError(f"softmax_rows expects (n, K>=2), got {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        if logits.requires_grad:
            dot = (g * p).sum(axis=1, keepdims=True)
            logits.accumulate(p * (g - dot))

    return Tensor(p, (logits,), bw)


def _check_targets(targets, n, k, op):
    t = np.asarray(targets, dtype=np.int64)
    if t.ndim != 1 or t.shape[0] != n:
        raise ValueError(f"{op}: targets must be a length-{n} class-id list")
    if t.size == 0:
        raise ValueError(f"{op}: empty batch rejected")
    if t.min() < 0 or t.max() >= k:
        raise ValueError(f"{op}: target ids must lie in [0, {k})")
    return t


def cross_entropy(logits, targets):
    """Mean negative log-probability of the target class (from logits)."""
    if logits.data.ndim != 2:
        raise ValueError(f"cross_entropy expects (n, K) logits, got {logits.shape}")
    n, k = logits.shape
    t = _check_targets(targets, n, k, "cross_entropy")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = (lse - z[np.arange(n), t]).mean()

    def bw(g):
        if logits.requires_grad:
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(n), t] -= 1.0
            logits.accumulate(p * (float(g) / n))

    return Tensor(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


def dice_loss(probs, targets, smooth=1.0):
    """One minus the mean smoothed soft-Dice over all K classes."""
    if probs.data.ndim != 2:
        raise ValueError(f"dice_loss expects (n, K) probabilities, got {probs.shape}")
    n, k = probs.shape
    t = _check_targets(targets, n, k, "dice_loss")
    onehot = np.zeros((n, k), dtype=probs.dtype)
    onehot[np.arange(n), t] = 1.0
    inter = (probs.data * onehot).sum(axis=0)
    num = 2.0 * inter + smooth
    den = probs.data.sum(axis=0) + onehot.sum(axis=0) + smooth
    loss = 1.0 - (num / den).mean()

    def bw(g):
        if probs.requires_grad:
            coeff = (2.0 * onehot * den - num) / (den * den)
            probs.accumulate(coeff * (-float(g) / k))

    return Tensor(np.asarray(loss, dtype=probs.dtype), (probs,), bw)


def sample_volume(vol, coords):
    """Trilinearly sample a (c,d,h,w) feature tensor at (n,3) coordinates.

    Differentiable with respect to the volume; coordinates are constants.
    Matches volume.trilinear_sample bit for bit on the forward path.
    """
    if vol.data.ndim != 4:
        raise ValueError(f"sample_volume expects (c,d,h,w), got {vol.shape}")
    extent = vol.shape[1:]
    if min(extent) < 2:
        raise ValueError(f"trilinear sampling needs spatial extents >= 2, got {extent}")
    flat, weights = trilinear_flat_corners(extent, coords)
    out = trilinear_blend(vol.data, flat, weights)

    def bw(g):
        if not vol.requires_grad:
            return
        c = vol.shape[0]
        nvox = vol.data.size // c
        w = weights.astype(g.dtype) if g.dtype == np.float32 else weights
        gt = np.ascontiguousarray(g.T)  # (c, n)
        idx = flat.reshape(-1)
        gvol = np.empty((c, nvox), dtype=vol.dtype)
        for ch in range(c):
            gvol[ch] = np.bincount(idx, weights=(w * gt[ch]).ravel(), minlength=nvox)
        vol.accumulate(gvol.reshape(vol.shape))

    return Tensor(out, (vol,), bw)
