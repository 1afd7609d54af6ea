"""Volume ingestion, synthetic phantoms and slice access.

Volumes are stored on disk as a raw C-order payload plus a JSON sidecar
header::

    p01.raw        little-endian float32 (or uint8 for label volumes)
    p01.json       {"shape": [V, H, W], "dtype": "float32",
                    "spacing": [sz, sy, sx], "subject_id": "p01"}

A manifest (YAML or JSON) lists the subjects::

    num_classes: 4
    entries:
      - {subject_id: p01, volume: p01.json, labels: p01_seg.json}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml
from scipy import ndimage

VARIANCE_FLOOR = 1e-6
MIN_SIDE = 8

_DTYPES = {"float32": "<f4", "uint8": "u1", "int32": "<i4"}

# Incremented whenever label pixels are handed out; pre-training must keep it at 0.
LABEL_READS = {"count": 0}


class VolumeError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    subject_id: str
    volume_path: Path
    label_path: Optional[Path] = None


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    num_classes: int

    @property
    def subject_ids(self) -> list[str]:
        return [e.subject_id for e in self.entries]


@dataclass(frozen=True, eq=False)
class Volume:
    subject_id: str
    voxels: np.ndarray
    spacing: Optional[tuple[float, float, float]] = None
    labels: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.voxels.ndim != 3:
            raise VolumeError(f"{self.subject_id}: expected a 3D array, got shape {self.voxels.shape}")
        V, H, W = self.voxels.shape
        if V < 2 or H < MIN_SIDE or W < MIN_SIDE:
            raise VolumeError(f"{self.subject_id}: shape {self.voxels.shape} too small (need V>=2, H,W>=8)")
        if not np.all(np.isfinite(self.voxels)):
            raise VolumeError(f"{self.subject_id}: non-finite intensities")
        if self.labels is not None and self.labels.shape != self.voxels.shape:
            raise VolumeError(
                f"{self.subject_id}: label shape {self.labels.shape} != volume shape {self.voxels.shape}"
            )
        if self.spacing is not None and any(s <= 0 for s in self.spacing):
            raise VolumeError(f"{self.subject_id}: spacing must be positive, got {self.spacing}")

    @property
    def V(self) -> int:
        return self.voxels.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def label_slice(self, index: int) -> np.ndarray:
        if self.labels is None:
            raise VolumeError(f"{self.subject_id}: volume has no labels")
        LABEL_READS["count"] += 1
        return self.labels[index]

    def without_labels(self) -> "Volume":
        return Volume(self.subject_id, self.voxels, self.spacing)


@dataclass(frozen=True, eq=False)
class SliceRecord:
    subject_id: str
    slice_index: int
    V: int
    pixels: np.ndarray


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def read_raw(header_path: str | Path) -> tuple[np.ndarray, dict]:
    header_path = Path(header_path)
    if not header_path.exists():
        raise FileNotFoundError(f"volume header not found: {header_path}")
    header = json.loads(header_path.read_text())
    dtype = header.get("dtype", "float32")
    if dtype not in _DTYPES:
        raise VolumeError(f"{header_path}: unsupported dtype {dtype!r}")
    payload = header_path.with_suffix(".raw")
    if not payload.exists():
        raise FileNotFoundError(f"volume payload not found: {payload}")
    shape = tuple(int(s) for s in header["shape"])
    data = np.fromfile(payload, dtype=_DTYPES[dtype])
    if data.size != int(np.prod(shape)):
        raise VolumeError(
            f"{header_path}: header declares shape {list(shape)} ({int(np.prod(shape))} values) "
            f"but payload holds {data.size} values"
        )
    return data.reshape(shape), header


def write_raw(header_path: str | Path, array: np.ndarray, subject_id: str, spacing=None) -> Path:
    header_path = Path(header_path)
    dtype = {np.dtype("float32"): "float32", np.dtype("uint8"): "uint8", np.dtype("int32"): "int32"}.get(
        array.dtype
    )
    if dtype is None:
        raise VolumeError(f"cannot store dtype {array.dtype}")
    header_path.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(array, dtype=_DTYPES[dtype]).tofile(header_path.with_suffix(".raw"))
    header = {
        "shape": list(array.shape),
        "dtype": dtype,
        "spacing": list(spacing) if spacing is not None else None,
        "subject_id": subject_id,
    }
    header_path.write_text(json.dumps(header, indent=2) + "\n")
    return header_path


def normalize_intensities(voxels: np.ndarray) -> np.ndarray:
    """Per-volume z-score; constant volumes map to zeros."""
    v = voxels.astype(np.float64)
    std = max(float(v.std()), np.sqrt(VARIANCE_FLOOR))
    return ((v - v.mean()) / std).astype(np.float32)


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    raw = yaml.safe_load(path.read_text())
    if not isinstance(raw, dict) or "entries" not in raw or "num_classes" not in raw:
        raise VolumeError(f"{path}: manifest needs 'num_classes' and 'entries'")
    num_classes = int(raw["num_classes"])
    if num_classes < 1:
        raise VolumeError(f"{path}: num_classes must be positive")
    seen: set[str] = set()
    entries = []
    for item in raw["entries"]:
        sid = str(item["subject_id"])
        if sid in seen:
            raise VolumeError(f"{path}: duplicate subject_id {sid!r}")
        seen.add(sid)
        vol = (path.parent / item["volume"]).resolve()
        lab = (path.parent / item["labels"]).resolve() if item.get("labels") else None
        for p in (vol, lab):
            if p is None:
                continue
            if not p.exists() or not p.with_suffix(".raw").exists():
                raise VolumeError(f"{path}: entry {sid!r} references missing file {p}")
        entries.append(ManifestEntry(sid, vol, lab))
    manifest = DatasetManifest(tuple(entries), num_classes)
    # eager check that every volume loads
    for e in manifest.entries:
        try:
            load_volume(e, num_classes=num_classes)
        except (VolumeError, KeyError, json.JSONDecodeError) as exc:
            raise VolumeError(f"{path}: entry {e.subject_id!r} unreadable: {exc}") from exc
    return manifest


def load_volume(entry: ManifestEntry, normalize: bool = True, num_classes: Optional[int] = None) -> Volume:
    voxels, header = read_raw(entry.volume_path)
    if not np.all(np.isfinite(voxels)):
        raise VolumeError(f"{entry.subject_id}: NaN or Inf intensities in {entry.volume_path}")
    voxels = normalize_intensities(voxels) if normalize else voxels.astype(np.float32)
    labels = None
    if entry.label_path is not None:
        labels, _ = read_raw(entry.label_path)
        labels = labels.astype(np.uint8)
        if num_classes is not None and labels.size and labels.max() >= num_classes:
            raise VolumeError(f"{entry.subject_id}: label id {labels.max()} outside [0, {num_classes})")
    spacing = tuple(header["spacing"]) if header.get("spacing") else None
    return Volume(entry.subject_id, voxels, spacing, labels)


def load_dataset(manifest: DatasetManifest) -> list[Volume]:
    return [load_volume(e, num_classes=manifest.num_classes) for e in manifest.entries]


def save_volume(volume: Volume, directory: str | Path) -> ManifestEntry:
    directory = Path(directory)
    vol_path = write_raw(directory / f"{volume.subject_id}.json", volume.voxels, volume.subject_id, volume.spacing)
    lab_path = None
    if volume.labels is not None:
        lab_path = write_raw(
            directory / f"{volume.subject_id}_seg.json",
            volume.labels.astype(np.uint8),
            volume.subject_id,
            volume.spacing,
        )
    return ManifestEntry(volume.subject_id, vol_path, lab_path)


def write_dataset(volumes: Sequence[Volume], directory: str | Path, num_classes: int) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for v in volumes:
        e = save_volume(v, directory)
        item = {"subject_id": e.subject_id, "volume": e.volume_path.name}
        if e.label_path is not None:
            item["labels"] = e.label_path.name
        entries.append(item)
    manifest = directory / "manifest.yaml"
    manifest.write_text(yaml.safe_dump({"num_classes": num_classes, "entries": entries}, sort_keys=False))
    return manifest


# ---------------------------------------------------------------------------
# Slices
# ---------------------------------------------------------------------------


def get_slice(volume: Volume, index: int) -> SliceRecord:
    if not 0 <= index < volume.V:
        raise IndexError(f"{volume.subject_id}: slice {index} out of range [0, {volume.V})")
    return SliceRecord(volume.subject_id, int(index), volume.V, volume.voxels[index])


# ---------------------------------------------------------------------------
# Phantoms
# ---------------------------------------------------------------------------

PHANTOM_NUM_CLASSES = 4  # background, body, two organs

# mean intensity per class (background, body, organ A, organ B)
_CLASS_INTENSITY = (0.0, 1.0, 2.2, 0.2)


def _ellipsoid(zz, yy, xx, center, radii):
    return (
        ((zz - center[0]) / radii[0]) ** 2 + ((yy - center[1]) / radii[1]) ** 2 + ((xx - center[2]) / radii[2]) ** 2
    ) <= 1.0


def _organ(rng, body_center, body_radii, side):
    # Lateral offset >= 0.35 R_x on opposite sides with x radius <= 0.3 R_x keeps organs disjoint.
    R = np.array(body_radii)
    offsets = np.array([rng.uniform(-0.1, 0.1), rng.uniform(-0.15, 0.15), side * rng.uniform(0.35, 0.45)])
    radii = np.array([rng.uniform(0.4, 0.5), rng.uniform(0.3, 0.4), rng.uniform(0.22, 0.3)])
    return tuple(np.array(body_center) + offsets * R), tuple(radii * R)


def make_phantom(subject_id: str, V: int, H: int, W: int, rng: np.random.Generator) -> Volume:
    zz, yy, xx = np.meshgrid(
        np.arange(V, dtype=np.float64), np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij"
    )
    body_radii = (
        rng.uniform(0.36, 0.46) * V,
        rng.uniform(0.30, 0.42) * H,
        rng.uniform(0.30, 0.42) * W,
    )
    body_center = (
        (V - 1) / 2 + rng.uniform(-0.05, 0.05) * V,
        (H - 1) / 2 + rng.uniform(-0.06, 0.06) * H,
        (W - 1) / 2 + rng.uniform(-0.06, 0.06) * W,
    )
    body = _ellipsoid(zz, yy, xx, body_center, body_radii)
    for _ in range(50):
        labels = np.zeros((V, H, W), dtype=np.uint8)
        labels[body] = 1
        for cls, side in ((2, -1.0), (3, 1.0)):
            c, r = _organ(rng, body_center, body_radii, side)
            labels[_ellipsoid(zz, yy, xx, c, r)] = cls
        if all(z_contiguous(labels, cls) for cls in (1, 2, 3)):
            break
    else:
        raise RuntimeError(f"{subject_id}: could not place z-contiguous organs")

    intensity = np.zeros((V, H, W), dtype=np.float64)
    gain = rng.uniform(0.85, 1.15)
    for cls, level in enumerate(_CLASS_INTENSITY):
        intensity[labels == cls] = level * gain * rng.uniform(0.9, 1.1)
    # unlabeled distractor blob inside the body, present in about half the subjects
    if rng.random() < 0.5:
        c = (body_center[0], body_center[1] + rng.choice([-0.6, 0.6]) * body_radii[1], body_center[2])
        r = (0.3 * body_radii[0], 0.15 * body_radii[1], 0.2 * body_radii[2])
        blob = _ellipsoid(zz, yy, xx, c, r) & (labels == 1)
        intensity[blob] += 0.5
    # smooth in-plane bias field
    gy, gx = rng.uniform(-0.3, 0.3, size=2)
    intensity *= 1.0 + gy * (yy / H - 0.5) + gx * (xx / W - 0.5)
    intensity = ndimage.gaussian_filter(intensity, sigma=(0.0, 0.8, 0.8))
    intensity += rng.normal(0.0, 0.35, size=intensity.shape)
    return Volume(subject_id, normalize_intensities(intensity), (1.0, 1.0, 1.0), labels)


def make_phantom_dataset(num_subjects: int, V: int, H: int, W: int, seed: int) -> list[Volume]:
    """Synthetic ellipsoid phantoms with per-subject geometry and ground-truth labels.

    Each subject holds a body ellipsoid enclosing two organ ellipsoids
    (classes 2 and 3) and, for some subjects, an unlabeled distractor blob.
    Voxels are already z-scored. The output depends only on the arguments.
    """
    if min(V, H, W) < MIN_SIDE:
        raise ValueError(f"phantom dimensions must be >= {MIN_SIDE}, got V={V}, H={H}, W={W}")
    if num_subjects < 2:
        raise ValueError(f"need at least 2 subjects, got {num_subjects}")
    children = np.random.SeedSequence(seed).spawn(num_subjects)
    return [
        make_phantom(f"s{k:03d}", V, H, W, np.random.default_rng(ss)) for k, ss in enumerate(children)
    ]


def z_contiguous(labels: np.ndarray, cls: int) -> bool:
    present = np.flatnonzero((labels == cls).reshape(labels.shape[0], -1).any(axis=1))
    return present.size > 0 and present[-1] - present[0] + 1 == present.size


def adjacent_slice_dice(labels: np.ndarray, cls: int) -> list[float]:
    """Dice between consecutive slices of one class mask over its interior z-range.

    The first and last slice of the range are excluded.
    """
    mask = labels == cls
    present = np.flatnonzero(mask.reshape(mask.shape[0], -1).any(axis=1))
    if present.size < 3:
        return []
    out = []
    for z in range(present[0] + 1, present[-1] - 1):
        a, b = mask[z], mask[z + 1]
        out.append(2.0 * np.logical_and(a, b).sum() / (a.sum() + b.sum()))
    return out


def strip_labels(volumes: Sequence[Volume]) -> list[Volume]:
    return [v.without_labels() for v in volumes]


def with_voxels(volume: Volume, voxels: np.ndarray) -> Volume:
    return replace(volume, voxels=voxels)
