"""
Volume and annotation data model for the ROI localisation toolkit.

This module handles:
- Volume / BoundingBox / Annotation / DatasetIndex types
- Dataset directory I/O:
  * <root>/volumes/<id>.raw + <id>.json sidecar (16-bit little-endian payload)
  * <root>/annotations/<id>.json
  * <root>/index.json
- Intensity windowing and trilinear patch resampling
- Deterministic synthetic phantom generation (one target ellipsoid + distractors)

Usage:
    from volume_store import PhantomConfig, generate_phantom, save_volume, load_volume

    volume, annotation = generate_phantom(PhantomConfig(seed=7))
    save_volume(volume, "dataset/volumes/scan_0007.raw")
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

Triple = Tuple[int, int, int]
FloatTriple = Tuple[float, float, float]

MIN_DIM = 8
PAYLOAD_DTYPE = "i16le"
HU_WINDOW = (-200.0, 400.0)
UNITS = ("HU", "arb")


class VolumeFormatError(ValueError):
    """Raised when a volume, sidecar, annotation or index is malformed."""


class PhantomError(ValueError):
    """Raised when a phantom configuration cannot be realised."""


# =================================================================
# ========== TYPES =================================================
# =================================================================

@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned voxel box, half-open: [lower, lower + size)."""

    lower: Triple
    size: Triple

    def __post_init__(self):
        lower = tuple(int(v) for v in self.lower)
        size = tuple(int(v) for v in self.size)
        if len(lower) != 3 or len(size) != 3:
            raise ValueError(f"❌ BoundingBox needs 3 components, got lower={self.lower} size={self.size}")
        if min(size) < 1:
            raise ValueError(f"❌ BoundingBox size components must be >= 1, got {size}")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "size", size)

    @property
    def upper(self) -> Triple:
        return tuple(l + s for l, s in zip(self.lower, self.size))

    @property
    def voxel_count(self) -> int:
        return int(np.prod(self.size))

    @property
    def centre(self) -> FloatTriple:
        """Continuous centre, lower + size / 2."""
        return tuple(l + s / 2.0 for l, s in zip(self.lower, self.size))

    @property
    def centre_voxel(self) -> Triple:
        """Integer navigation centre, lower + size // 2."""
        return tuple(l + s // 2 for l, s in zip(self.lower, self.size))

    @classmethod
    def from_centre(cls, centre_voxel: Sequence[int], size: Sequence[int]) -> "BoundingBox":
        return cls(tuple(int(c) - int(s) // 2 for c, s in zip(centre_voxel, size)), tuple(size))

    def translated(self, offset: Sequence[int]) -> "BoundingBox":
        return BoundingBox(tuple(l + int(o) for l, o in zip(self.lower, offset)), self.size)

    def fits(self, dims: Sequence[int]) -> bool:
        return all(l >= 0 and u <= d for l, u, d in zip(self.lower, self.upper, dims))

    def shifted_inside(self, dims: Sequence[int]) -> "BoundingBox":
        """Keep the size (capped at dims) and slide the box back inside the volume."""
        size = tuple(min(s, int(d)) for s, d in zip(self.size, dims))
        lower = tuple(min(max(l, 0), int(d) - s) for l, s, d in zip(self.lower, size, dims))
        return BoundingBox(lower, size)

    def intersected(self, dims: Sequence[int]) -> Optional["BoundingBox"]:
        """Crop to the volume; None when nothing is left."""
        lower = tuple(max(l, 0) for l in self.lower)
        upper = tuple(min(u, int(d)) for u, d in zip(self.upper, dims))
        if any(u - l < 1 for l, u in zip(lower, upper)):
            return None
        return BoundingBox(lower, tuple(u - l for l, u in zip(lower, upper)))

    def to_json(self) -> dict:
        return {"lower": list(self.lower), "size": list(self.size)}


@dataclass(frozen=True)
class Volume:
    """3D scan. `voxels` is indexed [x, y, z]; the payload is x-fastest."""

    voxels: np.ndarray
    spacing: FloatTriple
    intensity_units: str = "HU"

    def __post_init__(self):
        voxels = np.asarray(self.voxels)
        if voxels.ndim != 3:
            raise VolumeFormatError(f"❌ Volume must be 3D, got shape {voxels.shape}")
        if min(voxels.shape) < MIN_DIM:
            raise VolumeFormatError(f"❌ Volume dims must be >= {MIN_DIM}, got {voxels.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise VolumeFormatError(f"❌ non-positive spacing: {self.spacing}")
        if self.intensity_units not in UNITS:
            raise VolumeFormatError(f"❌ Unknown intensity units: {self.intensity_units}")
        voxels = voxels.astype(np.int16, copy=False)
        voxels.setflags(write=False)
        object.__setattr__(self, "voxels", voxels)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> Triple:
        return tuple(int(d) for d in self.voxels.shape)

    @property
    def window(self) -> Optional[Tuple[float, float]]:
        """Fixed intensity window, or None for per-patch min/max scaling."""
        return HU_WINDOW if self.intensity_units == "HU" else None


@dataclass(frozen=True)
class Annotation:
    scan_id: str
    gt_box: BoundingBox
    organ_label: str = "target"

    def to_json(self) -> dict:
        return {"scan_id": self.scan_id, "lower": list(self.gt_box.lower),
                "size": list(self.gt_box.size), "organ": self.organ_label}


@dataclass(frozen=True)
class IndexEntry:
    scan_id: str
    volume_path: str
    annotation_path: Optional[str]
    labelled: bool


@dataclass
class DatasetIndex:
    root: Path
    entries: List[IndexEntry] = field(default_factory=list)

    def __post_init__(self):
        self.root = Path(self.root)
        seen = set()
        for entry in self.entries:
            if entry.scan_id in seen:
                raise VolumeFormatError(f"❌ Duplicate scan_id in index: {entry.scan_id}")
            seen.add(entry.scan_id)
            if entry.labelled and not entry.annotation_path:
                raise VolumeFormatError(f"❌ Labelled entry without annotation: {entry.scan_id}")

    @property
    def labelled(self) -> List[IndexEntry]:
        return [e for e in self.entries if e.labelled]

    @property
    def unlabelled(self) -> List[IndexEntry]:
        return [e for e in self.entries if not e.labelled]

    def entry(self, scan_id: str) -> IndexEntry:
        for e in self.entries:
            if e.scan_id == scan_id:
                return e
        raise KeyError(scan_id)


@dataclass(frozen=True)
class Scan:
    """A loaded volume with its annotation, or None for an annotation-free view."""

    scan_id: str
    volume: Volume
    annotation: Optional[Annotation] = None

    def without_annotation(self) -> "Scan":
        return replace(self, annotation=None)


@dataclass(frozen=True)
class PhantomConfig:
    dims: Triple = (64, 64, 64)
    spacing: FloatTriple = (1.0, 1.0, 3.0)
    background: float = 0.0
    organ_intensity: Tuple[float, float] = (150.0, 250.0)
    distractor_intensity: Tuple[float, float] = (300.0, 380.0)
    noise_sigma: float = 20.0
    organ_semi_axes: Tuple[int, ...] = (6, 12, 6, 12, 4, 8)
    distractor_semi_axes: Tuple[int, int] = (2, 5)
    distractor_count: int = 3
    seed: int = 0

    @property
    def semi_axis_ranges(self) -> List[Tuple[int, int]]:
        """organ_semi_axes is flattened (min_x, max_x, min_y, max_y, min_z, max_z)."""
        a = self.organ_semi_axes
        return [(int(a[0]), int(a[1])), (int(a[2]), int(a[3])), (int(a[4]), int(a[5]))]

    def validate(self):
        if len(self.organ_semi_axes) != 6:
            raise PhantomError("❌ organ_semi_axes needs 6 values (min/max per axis)")
        for (lo, hi), dim in zip(self.semi_axis_ranges, self.dims):
            if lo < 1 or hi < lo:
                raise PhantomError(f"❌ Invalid semi-axis range ({lo}, {hi})")
            # ellipsoid spans 2*hi+1 voxels, plus a 2-voxel margin on both sides
            if 2 * hi + 1 + 4 > dim:
                raise PhantomError(f"❌ organ cannot fit: semi-axis {hi} in dim {dim} with margin 2")
        if min(self.dims) < MIN_DIM:
            raise PhantomError(f"❌ Phantom dims must be >= {MIN_DIM}, got {self.dims}")
        if self.noise_sigma < 0 or self.distractor_count < 0:
            raise PhantomError("❌ noise_sigma and distractor_count must be >= 0")


# =================================================================
# ========== DATASET I/O ===========================================
# =================================================================

def _sidecar_path(raw_path: Path) -> Path:
    return raw_path.with_suffix(".json")


def save_volume(volume: Volume, path) -> Path:
    """Write `<id>.raw` (i16le, x fastest) and its `<id>.json` sidecar."""
    raw_path = Path(path)
    raw_path.parent.mkdir(parents=True, exist_ok=True)
    payload = volume.voxels.ravel(order="F").astype("<i2", copy=False).tobytes()
    raw_path.write_bytes(payload)
    sidecar = {
        "dims": list(volume.dims),
        "spacing_mm": list(volume.spacing),
        "dtype": PAYLOAD_DTYPE,
        "units": volume.intensity_units,
    }
    _sidecar_path(raw_path).write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
    return raw_path


def load_volume(path) -> Volume:
    """
    Load a `.raw` payload with its JSON sidecar.

    Raises:
        VolumeFormatError: missing/unparsable sidecar, payload size mismatch,
            non-positive dims or spacing
    """
    raw_path = Path(path)
    sidecar_path = _sidecar_path(raw_path)
    try:
        sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
        dims = tuple(int(d) for d in sidecar["dims"])
        spacing = tuple(float(s) for s in sidecar["spacing_mm"])
        units = sidecar.get("units", "HU")
    except FileNotFoundError:
        raise VolumeFormatError(f"❌ missing sidecar: {sidecar_path}")
    except (ValueError, KeyError, TypeError) as e:
        raise VolumeFormatError(f"❌ unparsable sidecar {sidecar_path}: {e}")

    if sidecar.get("dtype", PAYLOAD_DTYPE) != PAYLOAD_DTYPE:
        raise VolumeFormatError(f"❌ unsupported dtype {sidecar.get('dtype')} in {sidecar_path}")
    if len(dims) != 3 or min(dims) <= 0:
        raise VolumeFormatError(f"❌ non-positive dims: {dims}")
    if len(spacing) != 3 or min(spacing) <= 0:
        raise VolumeFormatError(f"❌ non-positive spacing: {spacing}")

    payload = raw_path.read_bytes()
    expected = int(np.prod(dims)) * 2
    if len(payload) != expected:
        raise VolumeFormatError(
            f"❌ payload size mismatch: {raw_path.name} has {len(payload)} bytes, expected {expected}"
        )
    voxels = np.frombuffer(payload, dtype="<i2").astype(np.int16).reshape(dims, order="F")
    return Volume(voxels=voxels, spacing=spacing, intensity_units=units)


def save_annotation(annotation: Annotation, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(annotation.to_json(), indent=2), encoding="utf-8")
    return path


def load_annotation(path, dims: Optional[Sequence[int]] = None) -> Annotation:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        annotation = Annotation(
            scan_id=str(data["scan_id"]),
            gt_box=BoundingBox(tuple(data["lower"]), tuple(data["size"])),
            organ_label=str(data.get("organ", "target")),
        )
    except (ValueError, KeyError, TypeError) as e:
        raise VolumeFormatError(f"❌ unparsable annotation {path}: {e}")
    if dims is not None and not annotation.gt_box.fits(dims):
        raise VolumeFormatError(f"❌ annotation box {annotation.gt_box} outside volume dims {tuple(dims)}")
    return annotation


def load_index(root) -> DatasetIndex:
    root = Path(root)
    index_path = root / "index.json"
    if not index_path.exists():
        raise FileNotFoundError(f"❌ No index.json found in dataset root: {root}")
    try:
        data = json.loads(index_path.read_text(encoding="utf-8"))
        entries = [
            IndexEntry(
                scan_id=str(item["scan_id"]),
                volume_path=str(item["volume"]),
                annotation_path=item.get("annotation"),
                labelled=bool(item.get("labelled", False)),
            )
            for item in data["entries"]
        ]
    except (ValueError, KeyError, TypeError) as e:
        raise VolumeFormatError(f"❌ unparsable index {index_path}: {e}")
    return DatasetIndex(root=root, entries=entries)


def save_index(index: DatasetIndex) -> Path:
    index.root.mkdir(parents=True, exist_ok=True)
    data = {"entries": [
        {"scan_id": e.scan_id, "volume": e.volume_path,
         "annotation": e.annotation_path, "labelled": e.labelled}
        for e in index.entries
    ]}
    path = index.root / "index.json"
    path.write_text(json.dumps(data, indent=2), encoding="utf-8")
    return path


def load_scan(index: DatasetIndex, entry: IndexEntry, with_annotation: bool = True) -> Scan:
    """Load one entry. `with_annotation=False` never touches the annotation file."""
    volume = load_volume(index.root / entry.volume_path)
    annotation = None
    if with_annotation and entry.annotation_path:
        annotation = load_annotation(index.root / entry.annotation_path, volume.dims)
    return Scan(scan_id=entry.scan_id, volume=volume, annotation=annotation)


def write_phantom_dataset(root, config: PhantomConfig, count: int,
                          labelled_fraction: float = 1.0) -> DatasetIndex:
    """Generate `count` phantoms with seeds config.seed, config.seed+1, ...;
    the first round(count * labelled_fraction) are flagged labelled."""
    root = Path(root)
    n_labelled = int(round(count * labelled_fraction))
    entries = []
    for i in range(count):
        scan_id = f"phantom_{i:04d}"
        volume, annotation = generate_phantom(replace(config, seed=config.seed + i), scan_id=scan_id)
        save_volume(volume, root / "volumes" / f"{scan_id}.raw")
        save_annotation(annotation, root / "annotations" / f"{scan_id}.json")
        entries.append(IndexEntry(scan_id, f"volumes/{scan_id}.raw",
                                  f"annotations/{scan_id}.json", i < n_labelled))
    index = DatasetIndex(root=root, entries=entries)
    save_index(index)
    log.info("Wrote %d phantoms (%d labelled) to %s", count, n_labelled, root)
    return index


# =================================================================
# ========== PATCHES ===============================================
# =================================================================

def normalize_intensity(values: np.ndarray, window: Optional[Tuple[float, float]]) -> np.ndarray:
    """Clamp to the window (or the values' own min/max) and scale to [0, 1]."""
    if window is None:
        lo, hi = float(np.min(values)), float(np.max(values))
    else:
        lo, hi = window
    if hi <= lo:
        return np.zeros_like(values, dtype=np.float32)
    out = (np.clip(values, lo, hi) - lo) / (hi - lo)
    return np.nan_to_num(out, nan=0.0, posinf=1.0, neginf=0.0).astype(np.float32)


def extract_patch(volume: Volume, box: BoundingBox, out_shape: Sequence[int]) -> np.ndarray:
    """
    Trilinear resample of the box region to out_shape, windowed and scaled to [0, 1].

    Sample j along an axis sits at index coordinate lower + (j + 0.5) * size / n - 0.5,
    so a box whose size equals out_shape reproduces the source voxels exactly.

    Raises:
        VolumeFormatError: box is degenerate after clipping or out_shape < 2
    """
    if len(out_shape) != 3 or min(out_shape) < 2:
        raise VolumeFormatError(f"❌ out_shape components must be >= 2, got {tuple(out_shape)}")
    clipped = box.intersected(volume.dims)
    if clipped is None:
        raise VolumeFormatError(f"❌ degenerate box after clipping: {box} in {volume.dims}")

    axes = [
        lo + (np.arange(n, dtype=np.float64) + 0.5) * (size / n) - 0.5
        for lo, size, n in zip(clipped.lower, clipped.size, out_shape)
    ]
    grid = np.meshgrid(*axes, indexing="ij")
    samples = ndimage.map_coordinates(
        volume.voxels.astype(np.float64), grid, order=1, mode="nearest"
    )
    return normalize_intensity(samples, volume.window)


# =================================================================
# ========== PHANTOMS ==============================================
# =================================================================

def _ellipsoid_mask(dims: Sequence[int], centre: Sequence[int], semi_axes: Sequence[int]) -> np.ndarray:
    x, y, z = np.ogrid[:dims[0], :dims[1], :dims[2]]
    return (((x - centre[0]) / semi_axes[0]) ** 2
            + ((y - centre[1]) / semi_axes[1]) ** 2
            + ((z - centre[2]) / semi_axes[2]) ** 2) <= 1.0


def _mask_bounds(mask: np.ndarray) -> BoundingBox:
    coords = np.nonzero(mask)
    lower = tuple(int(c.min()) for c in coords)
    upper = tuple(int(c.max()) + 1 for c in coords)
    return BoundingBox(lower, tuple(u - l for l, u in zip(lower, upper)))


def _boxes_apart(a: BoundingBox, b: BoundingBox, gap: int = 1) -> bool:
    """True when the boxes are separated by at least `gap` empty voxels on some axis."""
    return any(a.upper[i] + gap <= b.lower[i] or b.upper[i] + gap <= a.lower[i] for i in range(3))


def generate_phantom(config: PhantomConfig, scan_id: Optional[str] = None,
                     max_attempts: int = 200) -> Tuple[Volume, Annotation]:
    """
    Gaussian background noise + one target ellipsoid + `distractor_count` disjoint
    distractor ellipsoids in a separate intensity band. gt_box is the tight bound
    of the voxels actually painted for the target. Deterministic in config.seed.

    Raises:
        PhantomError: the organ or a distractor cannot be placed
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    dims = tuple(int(d) for d in config.dims)

    semi_axes = [int(rng.integers(lo, hi + 1)) for lo, hi in config.semi_axis_ranges]
    centre = [int(rng.integers(2 + a, d - 2 - a)) for a, d in zip(semi_axes, dims)]
    target_mask = _ellipsoid_mask(dims, centre, semi_axes)
    gt_box = _mask_bounds(target_mask)
    organ_value = float(rng.uniform(*config.organ_intensity))

    voxels = np.full(dims, config.background, dtype=np.float64)
    if config.noise_sigma > 0:
        voxels += rng.normal(0.0, config.noise_sigma, size=dims)
    voxels[target_mask] = organ_value

    placed = [gt_box]
    d_lo, d_hi = config.distractor_semi_axes
    for k in range(config.distractor_count):
        for _ in range(max_attempts):
            axes = [int(rng.integers(d_lo, d_hi + 1)) for _ in range(3)]
            if any(2 * a + 1 + 4 > d for a, d in zip(axes, dims)):
                raise PhantomError(f"❌ distractor semi-axes {axes} cannot fit in {dims}")
            c = [int(rng.integers(2 + a, d - 2 - a)) for a, d in zip(axes, dims)]
            mask = _ellipsoid_mask(dims, c, axes)
            bounds = _mask_bounds(mask)
            if all(_boxes_apart(bounds, other) for other in placed):
                voxels[mask] = float(rng.uniform(*config.distractor_intensity))
                placed.append(bounds)
                break
        else:
            raise PhantomError(f"❌ could not place distractor {k + 1} after {max_attempts} attempts")

    info = np.iinfo(np.int16)
    volume = Volume(
        voxels=np.clip(np.rint(voxels), info.min, info.max).astype(np.int16),
        spacing=config.spacing,
        intensity_units="HU",
    )
    annotation = Annotation(scan_id=scan_id or f"phantom_seed{config.seed}", gt_box=gt_box)
    return volume, annotation
