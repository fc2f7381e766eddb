"""Input validation helpers shared by the estimators and core routines."""

import numpy as np


def check_extent(extent, minimum=2, name="extent"):
    """Validate a (d, h, w) extent tuple and return it as a tuple of ints."""
    ext = tuple(int(e) for e in extent)
    if len(ext) != 3:
        raise ValueError(f"{name} must have 3 entries, got {len(ext)}")
    if any(e < minimum for e in ext):
        raise ValueError(f"{name} entries must be >= {minimum}, got {ext}")
    return ext


def as_volume(x, channels=None):
    """Coerce ``x`` to a Volume; 3D arrays get a singleton channel axis."""
    from .volume import Volume

    if not isinstance(x, Volume):
        arr = np.asarray(x)
        if arr.ndim == 3:
            arr = arr[None]
        x = Volume(arr)
    if channels is not None and x.channels != channels:
        raise ValueError(
            f"expected a volume with {channels} channel(s), got {x.channels}"
        )
    return x


def as_label_grid(y, num_classes=None):
    """Coerce ``y`` to a LabelGrid with an inferred or given class count."""
    from .volume import LabelGrid

    if not isinstance(y, LabelGrid):
        arr = np.asarray(y)
        if num_classes is None:
            num_classes = int(arr.max()) + 1 if arr.size else 1
        y = LabelGrid(arr.astype(np.uint8), num_classes)
    elif num_classes is not None and y.num_classes != num_classes:
        raise ValueError(
            f"expected {num_classes} label classes, got {y.num_classes}"
        )
    return y


def as_volume_list(xs, channels=None):
    from .volume import Volume

    if isinstance(xs, Volume) or (isinstance(xs, np.ndarray) and xs.ndim in (3, 4)):
        xs = [xs]
    return [as_volume(x, channels) for x in xs]


def as_label_list(ys, num_classes=None):
    from .volume import LabelGrid

    if isinstance(ys, LabelGrid) or (isinstance(ys, np.ndarray) and ys.ndim == 3):
        ys = [ys]
    return [as_label_grid(y, num_classes) for y in ys]
