"""Implicit-field segmentation model.

A small strided CNN encodes a low-resolution volume into a feature
pyramid; per-point features are gathered by trilinear interpolation,
concatenated with the raw coordinates, and decoded by a two-layer MLP
into per-class probabilities. Training samples random continuous points;
reconstruction queries a uniform lattice at any requested resolution.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .optim import ADAM_DEFAULTS, adam_step, zero_grad
from .validation import check_extent
from .volume import CoordBatch, LabelGrid, Volume, nearest_label, random_coords, uniform_grid_coords


@dataclass(frozen=True)
class LossWeights:
    """Weights of the cross-entropy and Dice terms in the training loss."""

    ce: float = 1.0
    dice: float = 1.0

    def __post_init__(self):
        if self.ce < 0 or self.dice < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.ce == 0 and self.dice == 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass
class StepReport:
    """Scalar losses and the number of supervised points for one step."""

    ce: float
    dice: float
    total: float
    points: int


@dataclass
class FeaturePyramid:
    """Ordered feature volumes at strictly halving (ceil) spatial extents."""

    levels: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.levels) < 2:
            raise ValueError("feature pyramid needs at least 2 levels")
        prev = None
        for lvl in self.levels:
            ext = lvl.shape[1:]
            if prev is not None:
                expected = tuple(-(-n // 2) for n in prev)
                if ext != expected:
                    raise ValueError(f"pyramid level extent {ext}, expected {expected}")
            prev = ext

    def __iter__(self):
        return iter(self.levels)

    def __len__(self):
        return len(self.levels)


def he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class PointFieldNet:
    """Encoder + point decoder with seeded He-normal initialization."""

    def __init__(self, in_channels=1, widths=(16, 32, 64), hidden=128,
                 num_classes=19, seed=0, dtype=np.float32):
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2:
            raise ValueError("encoder needs at least 2 stages")
        if any(w < 1 for w in widths):
            raise ValueError("stage widths must be positive")
        if num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        self.in_channels = int(in_channels)
        self.widths = widths
        self.hidden = int(hidden)
        self.num_classes = int(num_classes)
        self.seed = int(seed)
        self.dtype = np.dtype(dtype).type

        rng = np.random.default_rng(self.seed)
        self.feature_dim = sum(widths) + 3
        self._params = []
        self.stem_w = self._conv_param(rng, widths[0], self.in_channels, "stem_w")
        self.stem_b = self._bias_param(widths[0], "stem_b")
        self.stage_w, self.stage_b = [], []
        prev = widths[0]
        for i, w in enumerate(widths):
            self.stage_w.append(self._conv_param(rng, w, prev, f"stage{i}_w"))
            self.stage_b.append(self._bias_param(w, f"stage{i}_b"))
            prev = w
        self.dec1_w = self._linear_param(rng, self.feature_dim, self.hidden, "dec1_w")
        self.dec1_b = self._bias_param(self.hidden, "dec1_b")
        self.dec2_w = self._linear_param(rng, self.hidden, self.num_classes, "dec2_w")
        self.dec2_b = self._bias_param(self.num_classes, "dec2_b")

    def _register(self, p):
        self._params.append(p)
        return p

    def _conv_param(self, rng, c_out, c_in, name):
        w = he_normal(rng, (c_out, c_in, 3, 3, 3), c_in * 27, self.dtype)
        return self._register(ag.Parameter(w, name))

    def _linear_param(self, rng, f_in, f_out, name):
        w = he_normal(rng, (f_in, f_out), f_in, self.dtype)
        return self._register(ag.Parameter(w, name))

    def _bias_param(self, n, name):
        return self._register(ag.Parameter(np.zeros(n, dtype=self.dtype), name))

    def parameters(self):
        return list(self._params)

    def encoder_parameters(self):
        return [p for p in self._params if not p.name.startswith("dec")]

    def decoder_parameters(self):
        return [p for p in self._params if p.name.startswith("dec")]

    @property
    def config(self):
        return {
            "in_channels": self.in_channels,
            "widths": list(self.widths),
            "hidden": self.hidden,
            "num_classes": self.num_classes,
            "seed": self.seed,
        }


def encode(net, x):
    """Run the encoder; returns the feature pyramid (one level per stage)."""
    if isinstance(x, Volume):
        if x.channels != net.in_channels:
            raise ValueError(
                f"volume has {x.channels} channel(s), encoder expects {net.in_channels}"
            )
        data = x.data
    else:
        data = np.asarray(x)
    t = ag.Tensor(data.astype(net.dtype, copy=False))
    t = ag.relu(ag.conv3d(t, net.stem_w, net.stem_b, stride=1))
    levels = []
    for w, b in zip(net.stage_w, net.stage_b):
        t = ag.relu(ag.conv3d(t, w, b, stride=2))
        levels.append(t)
    return FeaturePyramid(levels)


def point_features(net, pyramid, batch):
    """Per-point concatenation of interpolated pyramid features and (x,y,z)."""
    coords = batch.coords if isinstance(batch, CoordBatch) else np.atleast_2d(batch)
    if coords.shape[0] < 1:
        raise ValueError("point_features needs a nonempty batch")
    parts = [ag.sample_volume(lvl, coords) for lvl in pyramid]
    parts.append(ag.constant(coords.astype(net.dtype)))
    return ag.concat(parts, axis=1)


def decode_logits(net, feats):
    h = ag.relu(ag.linear(feats, net.dec1_w, net.dec1_b))
    return ag.linear(h, net.dec2_w, net.dec2_b)


def _decode_tile(net, pyramid, part, chunk):
    """Decode one tile, zero-padded to a fixed row count.

    Every point then runs through identically shaped matrix products, so
    its probabilities are bit-identical however a batch is partitioned.
    """
    n = part.shape[0]
    if n < chunk:
        part = np.concatenate([part, np.zeros((chunk - n, 3))], axis=0)
    logits = decode_logits(net, point_features(net, pyramid, part))
    return ag.softmax_rows(logits).data[:n]


def predict_probs(net, x, batch, chunk=8192):
    """Per-point class probabilities, chunked to bound memory."""
    coords = batch.coords if isinstance(batch, CoordBatch) else np.atleast_2d(batch)
    pyramid = encode(net, x)
    rows = []
    for start in range(0, coords.shape[0], chunk):
        rows.append(_decode_tile(net, pyramid, coords[start:start + chunk], chunk))
    return np.concatenate(rows, axis=0)


def train_step(net, x, gt, n_points=4096, weights=None, rng=None,
               dice_smooth=1.0, adam=None):
    """One optimization step on randomly sampled points.

    Samples ``n_points`` uniform coordinates, looks up ground truth with
    nearest-neighbor interpolation, combines weighted cross-entropy and
    Dice losses, backpropagates, and applies one Adam update.
    """
    if n_points < 1:
        raise ValueError("train_step needs n_points >= 1")
    if not isinstance(gt, LabelGrid):
        raise TypeError("train_step expects LabelGrid ground truth")
    if rng is None:
        raise ValueError("train_step needs an explicit random generator")
    weights = weights or LossWeights()
    adam = adam or ADAM_DEFAULTS

    batch = random_coords(n_points, rng)
    targets = nearest_label(gt, batch)
    pyramid = encode(net, x)
    logits = decode_logits(net, point_features(net, pyramid, batch))
    ce = ag.cross_entropy(logits, targets)
    dice = ag.dice_loss(ag.softmax_rows(logits), targets, smooth=dice_smooth)
    total = ce * weights.ce + dice * weights.dice

    params = net.parameters()
    zero_grad(params)
    total.backward()
    adam_step(params, **adam)
    return StepReport(ce.item(), dice.item(), total.item(), n_points)


def reconstruct(net, x, out_extent, chunk=8192):
    """Argmax labels on a uniform lattice of any extent (lowest index wins ties)."""
    ext = check_extent(out_extent)
    batch = uniform_grid_coords(ext)
    pyramid = encode(net, x)
    labels = np.empty(len(batch), dtype=np.uint8)
    coords = batch.coords
    for start in range(0, coords.shape[0], chunk):
        probs = _decode_tile(net, pyramid, coords[start:start + chunk], chunk)
        labels[start:start + probs.shape[0]] = np.argmax(probs, axis=1)
    return LabelGrid(labels.reshape(ext), net.num_classes)


def count_params(net):
    """(encoder count, decoder count, total) over all trainable tensors."""
    enc = sum(p.data.size for p in net.encoder_parameters())
    dec = sum(p.data.size for p in net.decoder_parameters())
    return enc, dec, enc + dec
