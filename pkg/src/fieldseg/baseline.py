"""Dense fully-convolutional counterpart sharing the implicit model's encoder.

The head projects every pyramid level with 1x1x1 convolutions, fuses them
by nearest-upsample-and-add, and maps the fused grid to per-voxel class
logits with one final 3x3x3 convolution. It trains on the entire voxel
grid, which is the efficiency contrast with point-sampled training.
"""

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor
from .model import LossWeights, StepReport, encode, he_normal
from .optim import ADAM_DEFAULTS, adam_step, zero_grad
from .validation import check_extent
from .volume import LabelGrid, Volume, resample_volume


def conv1x1(x, w, b):
    """Per-voxel channel projection: (c_in,d,h,w) -> (c_out,d,h,w)."""
    if x.data.ndim != 4 or w.data.ndim != 2:
        raise ValueError(f"conv1x1 expects 4D input and 2D weights, got {x.shape}/{w.shape}")
    if w.shape[1] != x.shape[0]:
        raise ValueError(f"conv1x1 weights expect {w.shape[1]} channels, input has {x.shape[0]}")
    out = np.tensordot(w.data, x.data, axes=([1], [0])) + b.data[:, None, None, None]

    def bw(g):
        if b.requires_grad:
            b.accumulate(g.sum(axis=(1, 2, 3)))
        if w.requires_grad:
            w.accumulate(np.tensordot(g, x.data, axes=([1, 2, 3], [1, 2, 3])))
        if x.requires_grad:
            x.accumulate(np.tensordot(w.data.T, g, axes=([1], [0])))

    return Tensor(out, (x, w, b), bw)


def upsample_nearest(x, extent):
    """Nearest-neighbor upsampling of (c,d,h,w) to a target spatial extent."""
    ext = check_extent(extent, minimum=1)
    src = x.shape[1:]
    if any(o < i for o, i in zip(ext, src)):
        raise ValueError(f"upsample target {ext} smaller than source {src}")
    idx = [(np.arange(o) * i) // o for o, i in zip(ext, src)]
    out = x.data.take(idx[0], axis=1).take(idx[1], axis=2).take(idx[2], axis=3)

    def bw(g):
        if not x.requires_grad:
            return
        for axis, (ix, n_in) in enumerate(zip(idx, src), start=1):
            starts = np.searchsorted(ix, np.arange(n_in), side="left")
            g = np.add.reduceat(g, starts, axis=axis)
        x.accumulate(g)

    return Tensor(out, (x,), bw)


def voxel_rows(x):
    """Reshape a (K,d,h,w) grid into (d*h*w, K) rows, differentiably."""
    k = x.shape[0]
    spatial = x.shape[1:]
    out = x.data.reshape(k, -1).T.copy()

    def bw(g):
        if x.requires_grad:
            x.accumulate(g.T.reshape(k, *spatial))

    return Tensor(out, (x,), bw)


class DenseHead:
    """Per-level projections plus a final 3x3x3 classifier conv."""

    def __init__(self, widths=(16, 32, 64), proj_width=32, num_classes=19,
                 seed=0, dtype=np.float32):
        self.widths = tuple(int(w) for w in widths)
        self.proj_width = int(proj_width)
        self.num_classes = int(num_classes)
        self.seed = int(seed)
        self.dtype = np.dtype(dtype).type
        rng = np.random.default_rng(self.seed)
        self._params = []
        self.proj_w, self.proj_b = [], []
        for i, c in enumerate(self.widths):
            w = he_normal(rng, (self.proj_width, c), c, self.dtype)
            self.proj_w.append(self._register(Parameter(w, f"proj{i}_w")))
            self.proj_b.append(self._register(
                Parameter(np.zeros(self.proj_width, dtype=self.dtype), f"proj{i}_b")))
        w = he_normal(rng, (self.num_classes, self.proj_width, 3, 3, 3),
                      self.proj_width * 27, self.dtype)
        self.final_w = self._register(Parameter(w, "final_w"))
        self.final_b = self._register(
            Parameter(np.zeros(self.num_classes, dtype=self.dtype), "final_b"))

    def _register(self, p):
        self._params.append(p)
        return p

    def parameters(self):
        return list(self._params)

    @property
    def config(self):
        return {
            "widths": list(self.widths),
            "proj_width": self.proj_width,
            "num_classes": self.num_classes,
            "seed": self.seed,
        }


def count_head_params(head):
    return sum(p.data.size for p in head.parameters())


def dense_logits(net, head, x):
    """Fused per-voxel logits at the input volume's spatial extent."""
    extent = x.extent if isinstance(x, Volume) else np.asarray(x).shape[1:]
    pyramid = encode(net, x)
    levels = list(pyramid)
    t = conv1x1(levels[-1], head.proj_w[-1], head.proj_b[-1])
    for i in range(len(levels) - 2, -1, -1):
        t = conv1x1(levels[i], head.proj_w[i], head.proj_b[i]) + upsample_nearest(
            t, levels[i].shape[1:])
    t = ag.relu(upsample_nearest(t, extent))
    return ag.conv3d(t, head.final_w, head.final_b, stride=1)


def dense_predict(net, head, x):
    """Per-voxel softmax probabilities as a (K,d,h,w) Volume."""
    logits = dense_logits(net, head, x)
    probs = ag.softmax_rows(voxel_rows(logits)).data
    spacing = x.spacing if isinstance(x, Volume) else (1.0, 1.0, 1.0)
    k = logits.shape[0]
    return Volume(probs.T.reshape(k, *logits.shape[1:]).copy(), spacing)


def dense_train_step(net, head, x, gt, weights=None, dice_smooth=1.0, adam=None):
    """One Adam step on the full voxel grid."""
    if not isinstance(gt, LabelGrid):
        raise TypeError("dense_train_step expects LabelGrid ground truth")
    extent = x.extent if isinstance(x, Volume) else np.asarray(x).shape[1:]
    if tuple(gt.extent) != tuple(extent):
        raise ValueError(f"ground truth extent {gt.extent} != input extent {extent}")
    weights = weights or LossWeights()
    adam = adam or ADAM_DEFAULTS

    targets = gt.data.ravel()
    rows = voxel_rows(dense_logits(net, head, x))
    ce = ag.cross_entropy(rows, targets)
    dice = ag.dice_loss(ag.softmax_rows(rows), targets, smooth=dice_smooth)
    total = ce * weights.ce + dice * weights.dice

    params = net.parameters() + head.parameters()
    zero_grad(params)
    total.backward()
    adam_step(params, **adam)
    n = int(np.prod(extent))
    return StepReport(ce.item(), dice.item(), total.item(), n)


def dense_reconstruct(net, head, x, out_extent):
    """Argmax labels; resolutions beyond the input require trilinear upsampling."""
    ext = check_extent(out_extent)
    probs = dense_predict(net, head, x)
    if tuple(ext) != tuple(probs.extent):
        probs = resample_volume(probs, ext)
    labels = np.argmax(probs.data, axis=0).astype(np.uint8)
    return LabelGrid(labels, head.num_classes)
