"""Procedural lung-like phantoms with complete ground truth.

A phantom is built inside a jittered ellipsoid "lung": a binary-branching
bronchus tube tree routes from a hilum point to spatially stable group
targets (one per segment), the artery tree is a jittered offset of it,
segments are the nearest-seed partition of the lung over the labeled
tubes (with tube voxels overridden to their own group, making the two
containment rules exact), and veins are traced along segment boundaries
(intersegmental) or deep inside segments (intrasegmental).
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt, maximum_filter

from .validation import check_extent
from .volume import LabelGrid, Volume

VEIN_NONE, VEIN_INTRA, VEIN_INTER = 0, 1, 2

_FACE_OFFSETS = np.array(
    [[0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]]
)


@dataclass(frozen=True)
class PhantomConfig:
    extent: tuple = (32, 32, 32)
    num_segments: int = 18
    depth: int = 6
    radius_root: float = 2.2
    radius_leaf: float = 1.0
    noise_sigma: float = 40.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "extent", check_extent(self.extent, minimum=12))
        if not 2 <= self.num_segments <= 18:
            raise ValueError(f"num_segments must be in [2, 18], got {self.num_segments}")
        if 2 ** self.depth < self.num_segments:
            raise ValueError(
                f"depth {self.depth} cannot fit {self.num_segments} leaf groups")
        if self.radius_leaf <= 0 or self.radius_root < self.radius_leaf:
            raise ValueError("need radius_root >= radius_leaf > 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass
class Branch:
    points: np.ndarray  # (m, 3) float voxel coordinates, (d, h, w)
    radius: float
    group: int  # 1..S, or 0 for trunk/internal branches
    kind: str


@dataclass
class TubeTree:
    kind: str
    branches: list = field(default_factory=list)

    def groups(self):
        return sorted({b.group for b in self.branches if b.group > 0})


@dataclass
class Phantom:
    image: Volume
    lung_mask: LabelGrid
    lobe_labels: LabelGrid
    bronchus_labels: LabelGrid
    artery_labels: LabelGrid
    vein_labels: LabelGrid
    vein_kind: LabelGrid
    segments: LabelGrid
    config: PhantomConfig


@dataclass
class RuleReport:
    """Counts for the three anatomical rules; never mutates the phantom."""

    bronchus_total: int
    bronchus_violations: int
    artery_total: int
    artery_violations: int
    inter_total: int
    inter_adjacent: int

    @property
    def rule1_ok(self):
        return self.bronchus_violations == 0

    @property
    def rule2_ok(self):
        return self.artery_violations == 0

    @property
    def rule3_fraction(self):
        return 1.0 if self.inter_total == 0 else self.inter_adjacent / self.inter_total

    @property
    def rule3_ok(self):
        return self.rule3_fraction >= 0.99

    @property
    def passed(self):
        return self.rule1_ok and self.rule2_ok and self.rule3_ok

    def to_dict(self):
        return {
            "rule1_bronchus_containment": {
                "total": self.bronchus_total, "violations": self.bronchus_violations,
                "ok": self.rule1_ok},
            "rule2_artery_containment": {
                "total": self.artery_total, "violations": self.artery_violations,
                "ok": self.rule2_ok},
            "rule3_intersegmental_adjacency": {
                "total": self.inter_total, "adjacent": self.inter_adjacent,
                "fraction": self.rule3_fraction, "ok": self.rule3_ok},
            "passed": self.passed,
        }


def _sphere_template(n):
    """Deterministic Fibonacci-spiral directions; index i is group i+1."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    return np.stack([z, r * np.sin(phi), r * np.cos(phi)], axis=1)


def _nominal_lung(extent):
    center = np.asarray(extent, dtype=np.float64) * 0.5
    semi = np.asarray(extent, dtype=np.float64) * 0.45
    return center, semi


def _bent_polyline(start, end, rng, bend=0.8):
    mid = (start + end) / 2.0 + rng.normal(0.0, bend, 3)
    return np.stack([start, mid, end])


def _random_rotation(rng, sigma=0.05, clip=0.12):
    """Small random rotation matrix (Rodrigues) simulating pose variation."""
    axis = rng.normal(0.0, 1.0, 3)
    axis /= max(np.linalg.norm(axis), 1e-9)
    angle = float(np.clip(rng.normal(0.0, sigma), -clip, clip))
    k = np.array([[0, -axis[2], axis[1]],
                  [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def generate_tree(config, kind, rng):
    """Binary tube tree with exactly one leaf subtree per segment group.

    The bronchus routes from a hilum point toward jittered copies of a
    fixed spatial template (group ids keep stable anatomy across seeds).
    The artery tree is a jittered offset of the bronchus; veins are not
    built here (see generate_veins).
    """
    if kind not in ("bronchus", "artery"):
        raise ValueError(f"generate_tree builds bronchus/artery trees, not {kind!r}")
    s = config.num_segments
    center, semi = _nominal_lung(config.extent)
    rot = _random_rotation(rng)
    targets = center + (0.68 * semi * _sphere_template(s)) @ rot.T
    targets += np.clip(rng.normal(0.0, 2.2, size=(s, 3)), -4.0, 4.0)
    hilum = center - np.array([0.0, 0.0, 0.78 * semi[2]])

    branches = []
    trunk_end = hilum + 0.35 * (targets.mean(axis=0) - hilum)
    branches.append(Branch(_bent_polyline(hilum, trunk_end, rng),
                           config.radius_root, 0, "bronchus"))

    def radius_at(level):
        return max(config.radius_leaf, config.radius_root * 0.82 ** level)

    def grow(start, idxs, level, radius):
        if len(idxs) == 1:
            g = int(idxs[0]) + 1
            r = min(radius, radius_at(level))
            main = Branch(_bent_polyline(start, targets[idxs[0]], rng, bend=0.6),
                          r, g, "bronchus")
            branches.append(main)
            _twigs(main.points[-1], main.points[-1] - main.points[0],
                   level + 1, r, g, config.depth - level)
            return
        pts = targets[idxs]
        axis = int(np.argmax(pts.max(axis=0) - pts.min(axis=0)))
        order = np.argsort(pts[:, axis], kind="stable")
        half = (len(idxs) + 1) // 2
        for part in (order[:half], order[half:]):
            sub = idxs[part]
            if len(sub) == 1:
                grow(start, sub, level, radius)
                continue
            centroid = targets[sub].mean(axis=0)
            end = start + 0.5 * (centroid - start) + rng.normal(0.0, 0.5, 3)
            r = min(radius, radius_at(level))
            br = Branch(_bent_polyline(start, end, rng, bend=0.5), r, 0, "bronchus")
            branches.append(br)
            grow(br.points[-1], sub, level + 1, r)

    def _twigs(start, direction, level, radius, group, remaining):
        if remaining <= 0:
            return
        norm = np.linalg.norm(direction)
        d = direction / norm if norm > 1e-9 else np.array([0.0, 0.0, 1.0])
        length = max(1.6, 3.4 * 0.7 ** level)
        for _ in range(2):
            step = d + rng.normal(0.0, 0.55, 3)
            step *= length / max(np.linalg.norm(step), 1e-9)
            end = start + step
            r = min(radius, radius_at(level))
            br = Branch(np.stack([start, end]), r, group, "bronchus")
            branches.append(br)
            _twigs(end, step, level + 1, r, group, remaining - 1)

    grow(trunk_end, np.arange(s), 1, config.radius_root)
    tree = TubeTree("bronchus", branches)
    if kind == "bronchus":
        return tree

    off = np.array([0.8, 0.8, 0.5]) + rng.normal(0.0, 0.2, 3)
    off *= 1.5 / max(np.linalg.norm(off), 1e-9)
    shifted = [
        Branch(b.points + off + rng.normal(0.0, 0.2, 3), b.radius, b.group, "artery")
        for b in tree.branches
    ]
    return TubeTree("artery", shifted)


def rasterize_tubes(tree, extent, num_classes=None):
    """Group-id grid of all voxels within each branch's radius of its polyline.

    Overlaps resolve smaller radius first, then lower group id.
    """
    ext = check_extent(extent)
    if num_classes is None:
        groups = tree.groups()
        num_classes = (max(groups) + 1) if groups else 1
    grid = np.zeros(ext, dtype=np.uint8)
    order = sorted(tree.branches, key=lambda b: (-b.radius, -b.group))
    for b in order:
        if b.group == 0:
            continue
        for p, q in zip(b.points[:-1], b.points[1:]):
            _paint_segment(grid, p, q, b.radius, b.group)
    return LabelGrid(grid, num_classes)


def _paint_segment(grid, p, q, radius, group):
    ext = grid.shape
    lo = np.floor(np.minimum(p, q) - radius).astype(int)
    hi = np.ceil(np.maximum(p, q) + radius).astype(int) + 1
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, ext)
    if np.any(lo >= hi):
        return
    dd, hh, ww = np.meshgrid(*(np.arange(a, b) for a, b in zip(lo, hi)), indexing="ij")
    pts = np.stack([dd, hh, ww], axis=-1).astype(np.float64)
    seg = q - p
    denom = float(seg @ seg)
    if denom < 1e-12:
        t = np.zeros(pts.shape[:-1])
    else:
        t = np.clip(((pts - p) @ seg) / denom, 0.0, 1.0)
    closest = p + t[..., None] * seg
    dist2 = ((pts - closest) ** 2).sum(axis=-1)
    mask = dist2 <= radius * radius
    grid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]][mask] = group


def partition_segments(lung_mask, bronchus_labels, artery_labels):
    """Nearest-seed partition of the lung with exact tube containment.

    Every lung voxel takes the group of its nearest labeled tube voxel
    (Euclidean; ties go to the lower group id), then tube voxels are
    overridden to their own group.
    """
    s = bronchus_labels.num_classes - 1
    lung = lung_mask.data > 0
    seeds = [
        (bronchus_labels.data == g) | (artery_labels.data == g)
        for g in range(1, s + 1)
    ]
    for g, mask in enumerate(seeds, start=1):
        if not mask.any():
            raise ValueError(f"group {g} has no seed voxels")
    dists = np.stack([distance_transform_edt(~m) for m in seeds])
    labels = (np.argmin(dists, axis=0) + 1).astype(np.uint8)
    labels[~lung] = 0
    for g in range(1, s + 1):
        labels[(bronchus_labels.data == g) & lung] = g
        labels[(artery_labels.data == g) & lung] = g
    return LabelGrid(labels, s + 1)


def _boundary_mask(seg):
    """Voxels adjoining a face neighbor with a different nonzero label."""
    out = np.zeros(seg.shape, dtype=bool)
    for axis in range(3):
        a = [slice(None)] * 3
        b = [slice(None)] * 3
        a[axis] = slice(None, -1)
        b[axis] = slice(1, None)
        a, b = tuple(a), tuple(b)
        differ = (seg[a] != seg[b]) & (seg[a] > 0) & (seg[b] > 0)
        out[a] |= differ
        out[b] |= differ
    return out


def _interior_mask(seg, group, reach):
    """Voxels of ``group`` with no other segment within Chebyshev ``reach``."""
    other = (seg > 0) & (seg != group)
    near_other = maximum_filter(other.astype(np.uint8), size=2 * reach + 1) > 0
    return (seg == group) & ~near_other


def _walk(mask, start, steps, rng):
    path = [tuple(start)]
    here = np.asarray(start)
    ext = mask.shape
    for _ in range(steps):
        lo = np.maximum(here - 1, 0)
        hi = np.minimum(here + 2, ext)
        cand = np.argwhere(mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]) + lo
        cand = [tuple(c) for c in cand if tuple(c) not in path[-3:]]
        if not cand:
            break
        here = np.asarray(cand[rng.integers(len(cand))])
        path.append(tuple(here))
    return np.asarray(path)


def _stamp(path, where_ok):
    """Face-neighborhood (Euclidean radius 1) of a voxel path, as a mask."""
    out = np.zeros(where_ok.shape, dtype=bool)
    ext = np.asarray(where_ok.shape)
    for voxel in path:
        pts = np.clip(voxel + _FACE_OFFSETS, 0, ext - 1)
        out[pts[:, 0], pts[:, 1], pts[:, 2]] = True
    return out & where_ok


def generate_veins(segments, rng, config):
    """Vein tubes: intersegmental along boundaries, intrasegmental inside.

    Returns (vein_labels, vein_kind); kind 2 voxels hug voxels where at
    least two segment labels adjoin, kind 1 voxels stay deep inside one
    segment.
    """
    seg = segments.data
    s = segments.num_classes - 1
    vein = np.zeros(seg.shape, dtype=np.uint8)
    kind = np.zeros(seg.shape, dtype=np.uint8)
    inside = seg > 0

    boundary = _boundary_mask(seg)
    bpts = np.argwhere(boundary)
    if bpts.size:
        n_inter = max(2, s // 2) + 2
        for _ in range(n_inter):
            start = bpts[rng.integers(len(bpts))]
            path = _walk(boundary, start, steps=16, rng=rng)
            hit = _stamp(path, inside & (kind == 0))
            kind[hit] = VEIN_INTER
            vein[hit] = seg[hit]

    for g in range(1, s + 1):
        cushion = _interior_mask(seg, g, reach=2)
        if not cushion.any():
            continue
        deep = _interior_mask(seg, g, reach=3)
        if not deep.any():
            deep = cushion
        dpts = np.argwhere(deep)
        start = dpts[rng.integers(len(dpts))]
        path = _walk(deep, start, steps=6, rng=rng)
        # keep the dilated tube inside the radius-2 cushion so every
        # intrasegmental voxel sees exactly one segment label nearby
        hit = _stamp(path, inside & (kind == 0) & cushion)
        kind[hit] = VEIN_INTRA
        vein[hit] = g

    return LabelGrid(vein, s + 1), LabelGrid(kind, 3)


def synth_image(lung_mask, bronchus_labels, artery_labels, vein_labels,
                noise_sigma, rng):
    """HU-like piecewise-constant image plus noise, rescaled into [0, 1]."""
    hu = np.zeros(lung_mask.data.shape, dtype=np.float64)
    hu[lung_mask.data > 0] = -800.0
    hu[(artery_labels.data > 0) | (vein_labels.data > 0)] = 100.0
    hu[bronchus_labels.data > 0] = -1000.0
    if noise_sigma > 0:
        hu += rng.normal(0.0, noise_sigma, hu.shape)
    img = np.clip((hu + 1000.0) / 1100.0, 0.0, 1.0).astype(np.float32)
    return Volume(img[None])


def _lobe_labels(segments):
    s = segments.num_classes - 1
    n_lobes = 5 if s >= 10 else min(5, max(1, s // 2))
    lut = np.zeros(s + 1, dtype=np.uint8)
    for g in range(1, s + 1):
        lut[g] = (g - 1) * n_lobes // s + 1
    return LabelGrid(lut[segments.data], n_lobes + 1)


class _RetryGeneration(Exception):
    pass


def generate_phantom(config):
    """Deterministic phantom for (config, seed); retries internal jitter
    until every group keeps at least one tube voxel inside the lung."""
    last = None
    for attempt in range(25):
        try:
            return _generate_once(config, attempt)
        except _RetryGeneration as exc:
            last = exc
    raise ValueError(
        f"could not fit {config.num_segments} groups in extent {config.extent}: {last}")


def _generate_once(config, attempt):
    ext = config.extent
    s = config.num_segments
    root = np.random.SeedSequence([config.seed, attempt])
    k_lung, k_tree, k_vein, k_img = root.spawn(4)

    rng_lung = np.random.default_rng(k_lung)
    center, semi = _nominal_lung(ext)
    center = center + rng_lung.normal(0.0, 0.5, 3)
    semi = semi * (1.0 + rng_lung.normal(0.0, 0.03, 3))
    dd, hh, ww = np.meshgrid(*(np.arange(n) for n in ext), indexing="ij")
    ellip = (((dd - center[0]) / semi[0]) ** 2
             + ((hh - center[1]) / semi[1]) ** 2
             + ((ww - center[2]) / semi[2]) ** 2)
    lung = LabelGrid((ellip <= 1.0).astype(np.uint8), 2)

    bron_tree = generate_tree(config, "bronchus", np.random.default_rng(k_tree))
    art_tree = generate_tree(config, "artery", np.random.default_rng(k_tree))
    bron = rasterize_tubes(bron_tree, ext, num_classes=s + 1)
    art = rasterize_tubes(art_tree, ext, num_classes=s + 1)

    inside = lung.data > 0
    bron.data[~inside] = 0
    art.data[~inside] = 0
    art.data[(bron.data > 0) & (art.data > 0) & (bron.data != art.data)] = 0
    for g in range(1, s + 1):
        if not ((bron.data == g).any() and (art.data == g).any()):
            raise _RetryGeneration(f"group {g} lost its tube voxels")

    segments = partition_segments(lung, bron, art)
    vein, vkind = generate_veins(segments, np.random.default_rng(k_vein), config)
    image = synth_image(lung, bron, art, vein, config.noise_sigma,
                        np.random.default_rng(k_img))
    return Phantom(
        image=image, lung_mask=lung, lobe_labels=_lobe_labels(segments),
        bronchus_labels=bron, artery_labels=art, vein_labels=vein,
        vein_kind=vkind, segments=segments, config=config)


def validate_phantom(phantom):
    """Check the three anatomical rules; returns counts, never mutates."""
    seg = phantom.segments.data
    b_mask = phantom.bronchus_labels.data > 0
    a_mask = phantom.artery_labels.data > 0
    b_bad = int((seg[b_mask] != phantom.bronchus_labels.data[b_mask]).sum())
    a_bad = int((seg[a_mask] != phantom.artery_labels.data[a_mask]).sum())

    inter = np.argwhere(phantom.vein_kind.data == VEIN_INTER)
    adjacent = 0
    if inter.size:
        offs = np.argwhere(np.ones((5, 5, 5))) - 2
        ext = np.asarray(seg.shape)
        nbrs = np.clip(inter[:, None, :] + offs[None, :, :], 0, ext - 1)
        win = seg[nbrs[..., 0], nbrs[..., 1], nbrs[..., 2]]
        mx = win.max(axis=1)
        mn = np.where(win == 0, 255, win).min(axis=1)
        adjacent = int(((mx > 0) & (mn < 255) & (mx != mn)).sum())
    return RuleReport(
        bronchus_total=int(b_mask.sum()), bronchus_violations=b_bad,
        artery_total=int(a_mask.sum()), artery_violations=a_bad,
        inter_total=int(inter.shape[0]), inter_adjacent=adjacent)
