"""Scikit-learn style estimators wrapping the implicit and dense models.

Both estimators follow the usual conventions: hyperparameters are stored
verbatim in ``__init__`` (so ``get_params``/``set_params``/``clone`` work),
fitted state lives in trailing-underscore attributes, and ``fit`` returns
``self``. Inputs are Volumes/LabelGrids or plain arrays coerced by the
validation helpers.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import baseline as bl
from . import model as md
from .metrics import dice_per_class
from .validation import as_label_list, as_volume_list, check_extent
from .volume import CoordBatch


class _SegmenterBase(BaseEstimator):
    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError(
                f"{type(self).__name__} is not fitted yet; call fit first"
            )

    def _adam(self):
        return dict(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)

    def _loss_weights(self):
        return md.LossWeights(self.ce_weight, self.dice_weight)

    def _validate_pairs(self, X, y):
        xs = as_volume_list(X, channels=self.in_channels)
        ys = as_label_list(y, num_classes=self.num_classes)
        if len(xs) != len(ys):
            raise ValueError(f"got {len(xs)} volumes but {len(ys)} label grids")
        if not xs:
            raise ValueError("fit needs at least one (volume, labels) pair")
        return xs, ys

    def score(self, X, y):
        """Mean macro Dice over foreground classes, full grids."""
        self._check_fitted()
        xs, ys = self._validate_pairs(X, y)
        scores = []
        for vol, gt in zip(xs, ys):
            pred = self.predict(vol, extent=gt.extent)
            _, macro = dice_per_class(gt, pred)
            scores.append(macro)
        return float(np.mean(scores))


class ImplicitSegmenter(_SegmenterBase):
    """Point-queried implicit-field segmenter with arbitrary-resolution output."""

    def __init__(self, in_channels=1, widths=(16, 32, 64), hidden=128,
                 num_classes=19, steps=2000, points_per_step=4096,
                 lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 ce_weight=1.0, dice_weight=1.0, dice_smooth=1.0,
                 seed=0, chunk_size=8192):
        self.in_channels = in_channels
        self.widths = widths
        self.hidden = hidden
        self.num_classes = num_classes
        self.steps = steps
        self.points_per_step = points_per_step
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.ce_weight = ce_weight
        self.dice_weight = dice_weight
        self.dice_smooth = dice_smooth
        self.seed = seed
        self.chunk_size = chunk_size

    def fit(self, X, y):
        xs, ys = self._validate_pairs(X, y)
        self.net_ = md.PointFieldNet(
            in_channels=self.in_channels, widths=self.widths, hidden=self.hidden,
            num_classes=self.num_classes, seed=self.seed)
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 1]))
        weights = self._loss_weights()
        adam = self._adam()
        self.history_ = []
        for step in range(self.steps):
            i = step % len(xs)
            report = md.train_step(
                self.net_, xs[i], ys[i], n_points=self.points_per_step,
                weights=weights, rng=rng, dice_smooth=self.dice_smooth, adam=adam)
            self.history_.append(report)
        self.points_per_step_ = self.points_per_step
        return self

    def predict(self, X, extent=None):
        """Reconstruct a label grid at any extent (defaults to the input's)."""
        self._check_fitted()
        vol = as_volume_list(X, channels=self.in_channels)[0]
        ext = check_extent(extent) if extent is not None else vol.extent
        return md.reconstruct(self.net_, vol, ext, chunk=self.chunk_size)

    def predict_proba(self, X, coords):
        """Class probabilities at explicit continuous coordinates."""
        self._check_fitted()
        vol = as_volume_list(X, channels=self.in_channels)[0]
        batch = coords if isinstance(coords, CoordBatch) else CoordBatch(coords, origin="user")
        return md.predict_probs(self.net_, vol, batch, chunk=self.chunk_size)

    def count_params(self):
        self._check_fitted()
        return md.count_params(self.net_)


class DenseSegmenter(_SegmenterBase):
    """Dense FCN-style counterpart: same encoder, per-voxel head, full-grid loss."""

    def __init__(self, in_channels=1, widths=(16, 32, 64), proj_width=32,
                 num_classes=19, steps=2000,
                 lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 ce_weight=1.0, dice_weight=1.0, dice_smooth=1.0, seed=0):
        self.in_channels = in_channels
        self.widths = widths
        self.proj_width = proj_width
        self.num_classes = num_classes
        self.steps = steps
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.ce_weight = ce_weight
        self.dice_weight = dice_weight
        self.dice_smooth = dice_smooth
        self.seed = seed

    def fit(self, X, y):
        xs, ys = self._validate_pairs(X, y)
        for vol, gt in zip(xs, ys):
            if tuple(gt.extent) != tuple(vol.extent):
                raise ValueError(
                    f"dense training needs matching extents, got {vol.extent} vs {gt.extent}")
        self.net_ = md.PointFieldNet(
            in_channels=self.in_channels, widths=self.widths,
            num_classes=self.num_classes, seed=self.seed)
        self.head_ = bl.DenseHead(
            widths=self.widths, proj_width=self.proj_width,
            num_classes=self.num_classes, seed=self.seed + 1)
        weights = self._loss_weights()
        adam = self._adam()
        self.history_ = []
        for step in range(self.steps):
            i = step % len(xs)
            report = bl.dense_train_step(
                self.net_, self.head_, xs[i], ys[i], weights=weights,
                dice_smooth=self.dice_smooth, adam=adam)
            self.history_.append(report)
        self.points_per_step_ = self.history_[-1].points if self.history_ else 0
        return self

    def predict(self, X, extent=None):
        self._check_fitted()
        vol = as_volume_list(X, channels=self.in_channels)[0]
        ext = check_extent(extent) if extent is not None else vol.extent
        return bl.dense_reconstruct(self.net_, self.head_, vol, ext)

    def predict_proba_volume(self, X):
        self._check_fitted()
        vol = as_volume_list(X, channels=self.in_channels)[0]
        return bl.dense_predict(self.net_, self.head_, vol)

    def count_params(self):
        self._check_fitted()
        enc, _, _ = md.count_params(self.net_)
        head = bl.count_head_params(self.head_)
        return enc, head, enc + head
