"""Bit-exact serialization: .vol grids, checkpoints, slices, boundary meshes.

A .vol file is a JSON header next to a raw little-endian payload with the
same stem and a .raw suffix. Checkpoints are a JSON manifest (config,
seed, named sections with byte offsets) plus a .bin blob of float32
parameters. Everything is little-endian regardless of host.
"""

import colorsys
import dataclasses
import json
from pathlib import Path

import numpy as np

from .baseline import DenseHead
from .model import PointFieldNet
from .phantom import Phantom, PhantomConfig
from .volume import LabelGrid, Volume

_DTYPE_TAGS = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}

CHECKPOINT_VERSION = 1

# class 0 is black; 18 fixed hue-stepped colors follow
PALETTE = np.array(
    [(0, 0, 0)]
    + [
        tuple(int(round(255 * c)) for c in colorsys.hsv_to_rgb((i * 0.53) % 1.0, 0.75, 0.95))
        for i in range(1, 19)
    ],
    dtype=np.uint8,
)


def _payload_path(path):
    return Path(path).with_suffix(".raw")


def _write_grid(path, data, header):
    path = Path(path)
    payload = _payload_path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(header, f, sort_keys=True, indent=2)
        f.write("\n")
    tag = header["dtype"]
    payload.write_bytes(np.ascontiguousarray(data, dtype=_DTYPE_TAGS[tag]).tobytes())


def _read_grid(path):
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as f:
            header = json.load(f)
    except json.JSONDecodeError as e:
        raise ValueError(f"bad volume header {path}: {e}") from e
    tag = header.get("dtype")
    if tag not in _DTYPE_TAGS:
        raise ValueError(f"{path}: unknown dtype tag {tag!r}")
    if header.get("endianness", "little") != "little":
        raise ValueError(f"{path}: unsupported endianness {header.get('endianness')!r}")
    shape = tuple(int(n) for n in header["shape"])
    dtype = _DTYPE_TAGS[tag]
    raw = _payload_path(path).read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) != expected:
        raise ValueError(
            f"{path}: payload length mismatch, expected {expected} bytes, got {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype).reshape(shape)
    return header, data


def save_volume(vol, path):
    tag = "u8" if vol.data.dtype == np.uint8 else "f32"
    header = {
        "shape": list(vol.data.shape),
        "dtype": tag,
        "spacing": list(vol.spacing),
        "order": "cdhw",
        "endianness": "little",
    }
    _write_grid(path, vol.data, header)


def load_volume(path):
    header, data = _read_grid(path)
    if len(header["shape"]) != 4:
        raise ValueError(f"{path}: expected a 4D (c,d,h,w) volume")
    arr = np.array(data)
    if header["dtype"] == "f32":
        arr = arr.astype(np.float32)
    return Volume(arr, tuple(header.get("spacing", (1.0, 1.0, 1.0))))


def save_labels(grid, path):
    header = {
        "shape": list(grid.data.shape),
        "dtype": "u8",
        "spacing": [1.0, 1.0, 1.0],
        "order": "dhw",
        "endianness": "little",
        "num_classes": grid.num_classes,
    }
    _write_grid(path, grid.data, header)


def load_labels(path):
    header, data = _read_grid(path)
    if len(header["shape"]) != 3 or header["dtype"] != "u8":
        raise ValueError(f"{path}: expected a 3D uint8 label grid")
    num_classes = int(header.get("num_classes", int(data.max()) + 1))
    return LabelGrid(np.array(data), num_classes)


def _blob_path(path):
    return Path(path).with_suffix(".bin")


def save_checkpoint(path, net, head=None, extra=None):
    """Write a model manifest (JSON) and parameter blob (.bin)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    params = [(p.name, p) for p in net.parameters()]
    if head is not None:
        params += [(f"head/{p.name}", p) for p in head.parameters()]
    sections, offset = [], 0
    chunks = []
    for name, p in params:
        data = np.ascontiguousarray(p.data, dtype="<f4")
        sections.append({
            "name": name,
            "shape": list(p.data.shape),
            "offset": offset,
            "nbytes": data.nbytes,
        })
        chunks.append(data.tobytes())
        offset += data.nbytes
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "dense" if head is not None else "implicit",
        "config": net.config,
        "head_config": head.config if head is not None else None,
        "seed": net.seed,
        "sections": sections,
        "total_bytes": offset,
    }
    if extra:
        manifest["extra"] = extra
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")
    _blob_path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path):
    """Rebuild (net, head, manifest); the net reproduces saved predictions."""
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise ValueError(f"bad checkpoint manifest {path}: {e}") from e
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"{path}: unsupported checkpoint version {manifest.get('format_version')}")
    blob = _blob_path(path).read_bytes()
    if len(blob) != manifest["total_bytes"]:
        raise ValueError(
            f"{path}: blob length {len(blob)} != manifest total {manifest['total_bytes']}")
    prev_end = 0
    for sec in manifest["sections"]:
        if sec["offset"] < prev_end:
            raise ValueError(f"{path}: overlapping section offsets at {sec['name']}")
        prev_end = sec["offset"] + sec["nbytes"]
    if prev_end != manifest["total_bytes"]:
        raise ValueError(f"{path}: sections do not cover the blob")

    net = PointFieldNet(**manifest["config"])
    head = DenseHead(**manifest["head_config"]) if manifest.get("head_config") else None
    by_name = {p.name: p for p in net.parameters()}
    if head is not None:
        by_name.update({f"head/{p.name}": p for p in head.parameters()})
    for sec in manifest["sections"]:
        p = by_name.get(sec["name"])
        if p is None:
            raise ValueError(f"{path}: unknown section {sec['name']!r}")
        raw = blob[sec["offset"]:sec["offset"] + sec["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(sec["shape"])
        if arr.shape != p.data.shape:
            raise ValueError(
                f"{path}: section {sec['name']} shape {arr.shape} != {p.data.shape}")
        p.data = arr.astype(p.data.dtype)
    return net, head, manifest


def _plane(data, axis, index):
    if not 0 <= index < data.shape[axis]:
        raise ValueError(f"slice index {index} out of range for axis {axis} "
                         f"(extent {data.shape[axis]})")
    return np.take(data, index, axis=axis)


def export_slice(obj, axis, index, path, window=(-1000.0, 200.0)):
    """PGM (P5) slice of a volume channel, or PPM (P6) palette slice of labels."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(obj, Volume):
        plane = _plane(obj.data[0], axis, index)
        lo, hi = float(window[0]), float(window[1])
        gray = np.clip((plane.astype(np.float64) - lo) / (hi - lo), 0.0, 1.0)
        gray = (gray * 255.0 + 0.5).astype(np.uint8)
        h, w = gray.shape
        with open(path, "wb") as f:
            f.write(f"P5\n{w} {h}\n255\n".encode())
            f.write(gray.tobytes())
    elif isinstance(obj, LabelGrid):
        plane = _plane(obj.data, axis, index)
        rgb = PALETTE[plane % len(PALETTE)]
        h, w = plane.shape
        with open(path, "wb") as f:
            f.write(f"P6\n{w} {h}\n255\n".encode())
            f.write(rgb.tobytes())
    else:
        raise TypeError("export_slice expects a Volume or LabelGrid")


def export_boundary_mesh(labels, path):
    """ASCII PLY of unit quads between voxels with differing labels.

    Quads are colored by the smaller nonzero label of the two sides; grid
    borders count as background. Empty foreground yields a valid mesh
    with zero counts.
    """
    lab = labels.data
    verts, faces, colors = [], [], []
    for axis in range(3):
        pad = np.pad(lab, [(1, 1) if a == axis else (0, 0) for a in range(3)])
        left = np.take(pad, range(0, lab.shape[axis] + 1), axis=axis)
        right = np.take(pad, range(1, lab.shape[axis] + 2), axis=axis)
        differ = (left != right) & ((left > 0) | (right > 0))
        for pos in np.argwhere(differ):
            l_val, r_val = int(left[tuple(pos)]), int(right[tuple(pos)])
            color = PALETTE[min(v for v in (l_val, r_val) if v > 0) % len(PALETTE)]
            d, h, w = (int(p) for p in pos)
            x, y, z = float(w), float(h), float(d)
            if axis == 0:  # face normal along z
                quad = [(x, y, z), (x + 1, y, z), (x + 1, y + 1, z), (x, y + 1, z)]
            elif axis == 1:  # normal along y
                quad = [(x, y, z), (x + 1, y, z), (x + 1, y, z + 1), (x, y, z + 1)]
            else:  # normal along x
                quad = [(x, y, z), (x, y + 1, z), (x, y + 1, z + 1), (x, y, z + 1)]
            start = len(verts)
            verts.extend(quad)
            colors.extend([color] * 4)
            faces.append((start, start + 1, start + 2, start + 3))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(verts)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        f.write(f"element face {len(faces)}\n")
        f.write("property list uchar int vertex_indices\nend_header\n")
        for (x, y, z), (r, g, b) in zip(verts, colors):
            f.write(f"{x:g} {y:g} {z:g} {r} {g} {b}\n")
        for a, b, c, d in faces:
            f.write(f"4 {a} {b} {c} {d}\n")


_PHANTOM_GRIDS = [
    "lung_mask", "lobe_labels", "bronchus_labels", "artery_labels",
    "vein_labels", "vein_kind", "segments",
]


def save_phantom(phantom, dirpath):
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    save_volume(phantom.image, d / "image.vol")
    for name in _PHANTOM_GRIDS:
        save_labels(getattr(phantom, name), d / f"{name}.vol")
    manifest = {"config": dataclasses.asdict(phantom.config)}
    with open(d / "phantom.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")


def load_phantom(dirpath):
    d = Path(dirpath)
    with open(d / "phantom.json", encoding="utf-8") as f:
        manifest = json.load(f)
    cfg = manifest["config"]
    cfg["extent"] = tuple(cfg["extent"])
    config = PhantomConfig(**cfg)
    grids = {name: load_labels(d / f"{name}.vol") for name in _PHANTOM_GRIDS}
    return Phantom(image=load_volume(d / "image.vol"), config=config, **grids)
