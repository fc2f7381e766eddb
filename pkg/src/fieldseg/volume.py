"""Voxel-grid containers and continuous<->discrete coordinate machinery.

Conventions used throughout the package:

* Dense volumes are stored as (channel, depth, height, width) row-major
  arrays; label grids as (depth, height, width) uint8 arrays.
* Continuous coordinates live in the cube [-1, 1]^3 with component order
  (x, y, z) mapping to grid axes (w, h, d).
* Align-corners: -1 maps to voxel index 0 and +1 to index n-1 on every
  axis, so cube corners coincide with corner voxel centers.
"""

from dataclasses import dataclass, field

import numpy as np

from .validation import check_extent

REAL_DTYPES = (np.float32, np.float64)


@dataclass
class Volume:
    """Multi-channel voxel grid with mm spacing metadata."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4:
            raise ValueError(f"volume data must be (c,d,h,w), got shape {self.data.shape}")
        if self.data.dtype not in (np.float32, np.float64, np.uint8):
            raise ValueError(f"unsupported volume dtype {self.data.dtype}")
        if min(self.data.shape) < 1:
            raise ValueError(f"volume axes must be positive, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be 3 positive reals, got {self.spacing}")

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def extent(self):
        """Spatial extent as (d, h, w)."""
        return self.data.shape[1:]


@dataclass
class LabelGrid:
    """Single-channel class-index grid; 0 is background."""

    data: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"label data must be (d,h,w), got shape {self.data.shape}")
        if self.data.dtype != np.uint8:
            raise ValueError(f"label data must be uint8, got {self.data.dtype}")
        self.num_classes = int(self.num_classes)
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.data.size and int(self.data.max()) >= self.num_classes:
            raise ValueError(
                f"label value {int(self.data.max())} out of range for "
                f"num_classes={self.num_classes}"
            )

    @property
    def extent(self):
        return self.data.shape


@dataclass(frozen=True)
class NormCoord:
    """A single continuous coordinate, clamped into [-1, 1]^3."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        for name in ("x", "y", "z"):
            v = float(getattr(self, name))
            object.__setattr__(self, name, min(1.0, max(-1.0, v)))

    def as_array(self):
        return np.array([self.x, self.y, self.z], dtype=np.float64)


@dataclass
class CoordBatch:
    """A batch of continuous coordinates plus a tag describing its origin."""

    coords: np.ndarray
    origin: str = "random"
    grid_extent: tuple | None = field(default=None)

    def __post_init__(self):
        arr = np.asarray(self.coords, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ValueError(f"coords must be (n,3), got shape {arr.shape}")
        if arr.shape[0] < 1:
            raise ValueError("empty coordinate batch rejected")
        self.coords = np.clip(arr, -1.0, 1.0)
        if self.origin not in ("random", "grid", "user"):
            raise ValueError(f"unknown origin tag {self.origin!r}")
        if self.grid_extent is not None:
            self.grid_extent = check_extent(self.grid_extent)

    def __len__(self):
        return self.coords.shape[0]


def norm_to_voxel(coords, extent):
    """Map normalized (x,y,z) coordinates to continuous (d,h,w) voxel indices.

    Align-corners: v = (p+1)/2 * (n-1) per axis, with x->w, y->h, z->d.
    """
    ext = check_extent(extent)
    arr = np.clip(np.asarray(coords, dtype=np.float64), -1.0, 1.0)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    scale = np.array([ext[2] - 1, ext[1] - 1, ext[0] - 1], dtype=np.float64)
    vwhd = (arr + 1.0) * 0.5 * scale
    vdhw = vwhd[:, ::-1]
    return vdhw[0] if single else vdhw


def _corner_indices_weights(extent, coords):
    """Lower corner indices and fractional offsets for trilinear blending.

    Returns int arrays (d0, h0, w0) clipped to [0, n-2] and float64
    fractions (fd, fh, fw) in [0, 1].
    """
    ext = check_extent(extent)
    v = norm_to_voxel(coords, ext)
    lo = np.floor(v).astype(np.int64)
    for axis, n in enumerate(ext):
        np.clip(lo[:, axis], 0, n - 2, out=lo[:, axis])
    frac = v - lo
    np.clip(frac, 0.0, 1.0, out=frac)
    return (lo[:, 0], lo[:, 1], lo[:, 2]), (frac[:, 0], frac[:, 1], frac[:, 2])


def trilinear_weights(extent, coords):
    """Per-point corner indices and the 8 blend weights.

    Corner order is (d0,h0,w0), (d0,h0,w1), (d0,h1,w0), (d0,h1,w1),
    (d1,h0,w0), (d1,h0,w1), (d1,h1,w0), (d1,h1,w1).
    """
    (d0, h0, w0), (fd, fh, fw) = _corner_indices_weights(extent, coords)
    gd, gh, gw = 1.0 - fd, 1.0 - fh, 1.0 - fw
    weights = np.stack(
        [
            gd * gh * gw,
            gd * gh * fw,
            gd * fh * gw,
            gd * fh * fw,
            fd * gh * gw,
            fd * gh * fw,
            fd * fh * gw,
            fd * fh * fw,
        ],
        axis=0,
    )
    return (d0, h0, w0), weights


def trilinear_flat_corners(extent, coords):
    """Flattened (8, n) corner indices and blend weights for an extent."""
    (d0, h0, w0), weights = trilinear_weights(extent, coords)
    _, nh, nw = extent
    flat = []
    for dd in (d0, d0 + 1):
        for hh in (h0, h0 + 1):
            for ww in (w0, w0 + 1):
                flat.append((dd * nh + hh) * nw + ww)
    return np.stack(flat), weights


def trilinear_blend(data, flat, weights):
    """Blend gathered corners of a (c,d,h,w) grid into an (n, c) matrix.

    Math runs in the grid's dtype; weights come in as float64 from the
    coordinate computation and are cast once for float32 grids.
    """
    c = data.shape[0]
    rows = np.ascontiguousarray(data.reshape(c, -1).T)
    gathered = rows[flat]  # (8, n, c)
    if data.dtype == np.float32:
        weights = weights.astype(np.float32)
    return (gathered * weights[:, :, None]).sum(axis=0)


def trilinear_sample(vol, batch):
    """Trilinearly interpolate every channel of ``vol`` at every point.

    Returns an (n, c) matrix in the volume's real dtype (float64 math).
    """
    if not isinstance(vol, Volume):
        raise TypeError("trilinear_sample expects a Volume")
    if min(vol.extent) < 2:
        raise ValueError(f"trilinear sampling needs spatial extents >= 2, got {vol.extent}")
    coords = batch.coords if isinstance(batch, CoordBatch) else np.atleast_2d(batch)
    flat, weights = trilinear_flat_corners(vol.extent, coords)
    return trilinear_blend(vol.data, flat, weights)


def nearest_label(labels, batch):
    """Nearest-neighbor label lookup; ties round half up per axis."""
    if not isinstance(labels, LabelGrid):
        raise TypeError("nearest_label expects a LabelGrid")
    coords = batch.coords if isinstance(batch, CoordBatch) else np.atleast_2d(batch)
    v = norm_to_voxel(coords, labels.extent)
    idx = np.floor(v + 0.5).astype(np.int64)
    for axis, n in enumerate(labels.extent):
        np.clip(idx[:, axis], 0, n - 1, out=idx[:, axis])
    return labels.data[idx[:, 0], idx[:, 1], idx[:, 2]]


def random_coords(n, rng):
    """n i.i.d. points uniform over [-1,1]^3; deterministic per generator state."""
    n = int(n)
    if n < 1:
        raise ValueError("random_coords needs n >= 1")
    pts = rng.uniform(-1.0, 1.0, size=(n, 3))
    return CoordBatch(pts, origin="random")


def uniform_grid_coords(out_extent):
    """Align-corners lattice covering [-1,1]^3, in (d,h,w) row-major order."""
    ext = check_extent(out_extent)
    zs = np.linspace(-1.0, 1.0, ext[0])
    ys = np.linspace(-1.0, 1.0, ext[1])
    xs = np.linspace(-1.0, 1.0, ext[2])
    zz, yy, xx = np.meshgrid(zs, ys, xs, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
    return CoordBatch(pts, origin="grid", grid_extent=ext)


def resample_volume(vol, new_extent):
    """Resample to a new extent: trilinear for real data, nearest for uint8."""
    ext = check_extent(new_extent)
    batch = uniform_grid_coords(ext)
    if vol.data.dtype == np.uint8:
        v = norm_to_voxel(batch.coords, vol.extent)
        idx = np.floor(v + 0.5).astype(np.int64)
        for axis, n in enumerate(vol.extent):
            np.clip(idx[:, axis], 0, n - 1, out=idx[:, axis])
        out = vol.data[:, idx[:, 0], idx[:, 1], idx[:, 2]]
        return Volume(out.reshape(vol.channels, *ext).copy(), vol.spacing)
    feats = trilinear_sample(vol, batch)
    out = feats.T.reshape(vol.channels, *ext)
    return Volume(np.ascontiguousarray(out), vol.spacing)


def resample_labels(labels, new_extent):
    """Nearest-neighbor resampling of a label grid."""
    ext = check_extent(new_extent)
    batch = uniform_grid_coords(ext)
    out = nearest_label(labels, batch).reshape(ext)
    return LabelGrid(out.copy(), labels.num_classes)
