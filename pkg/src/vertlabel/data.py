"""Spine phantoms, CT-style preprocessing, multi-label cropping and file I/O.

Arrays are indexed ``[z, y, x]`` (D, H, W); point coordinates are always
``(x, y, z)``.  World millimetres map to voxel indices through
``world = origin + spacing * index`` per axis, with ``spacing``/``origin``
stored in array order ``(d, h, w)``.

Volume file (``.spvol``)::

    SPVOL1\\n
    D H W sd sh sw od oh ow\\n
    D*H*W little-endian float32, x fastest, then y, then z

Label file: one ``<class_name> <x_mm> <y_mm> <z_mm>`` line per vertebra.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .losses import CropTarget

CLASS_NAMES = ([f"C{i}" for i in range(1, 8)] + [f"T{i}" for i in range(1, 13)]
               + [f"L{i}" for i in range(1, 6)] + ["S1", "S2"])
CLASS_INDEX = {name: i for i, name in enumerate(CLASS_NAMES)}
AIR_HU = -1000.0
VOLUME_MAGIC = b"SPVOL1\n"
MAX_EXTENT = 4096


class FormatError(ValueError):
    """Malformed volume, label or prediction file."""


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple = (2.0, 2.0, 2.0)
    origin: tuple = (0.0, 0.0, 0.0)
    norm_stats: tuple | None = None  # (mean, std) applied by preprocess

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3-D, got shape {self.data.shape}")
        if min(self.spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def extents(self):
        return self.data.shape

    def index_to_world(self, xyz):
        """Voxel ``(x, y, z)`` (array or ``[k, 3]``) to world mm ``(x, y, z)``."""
        xyz = np.asarray(xyz, dtype=np.float64)
        return np.asarray(self.origin[::-1]) + np.asarray(self.spacing[::-1]) * xyz

    def world_to_index(self, xyz_mm):
        xyz_mm = np.asarray(xyz_mm, dtype=np.float64)
        return (xyz_mm - np.asarray(self.origin[::-1])) / np.asarray(self.spacing[::-1])

    @property
    def floor_value(self):
        """Intensity of air after whatever normalization was applied."""
        if self.norm_stats is None:
            return AIR_HU
        mean, std = self.norm_stats
        return (AIR_HU - mean) / std


@dataclass
class LabelSet:
    classes: list = field(default_factory=list)
    centroids_mm: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.classes = [int(c) for c in self.classes]
        self.centroids_mm = np.asarray(self.centroids_mm, dtype=np.float64).reshape(-1, 3)
        if len(self.classes) != len(self.centroids_mm):
            raise ValueError("one centroid per class index required")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("class indices must be unique within a scan")
        for c in self.classes:
            if not 0 <= c < len(CLASS_NAMES):
                raise ValueError(f"class index {c} out of range")

    def __len__(self):
        return len(self.classes)

    def as_dict(self):
        return {c: self.centroids_mm[i] for i, c in enumerate(self.classes)}


# -- phantoms -------------------------------------------------------------------

@dataclass
class PhantomSpec:
    """Synthetic spine: bright ellipsoids along a curved axial centreline.

    Class ``c`` has in-plane radius ``radius_mm[0] + c * radius_step_mm`` and
    peak intensity ``intensity_hu + c * intensity_step_hu``,
    so class identity is recoverable from appearance as well as order.
    """
    num_vertebrae: int = 6
    first_class: int = 0
    shape: tuple = (64, 24, 24)
    spacing: tuple = (2.0, 2.0, 2.0)
    vertebra_gap_mm: float = 18.0
    gap_jitter_mm: float = 2.0
    start_mm: float = 14.0
    start_jitter_mm: float = 4.0
    radius_mm: tuple = (4.0, 4.0)  # (in-plane radius of the first class, axial half-height)
    radius_step_mm: float = 0.8
    intensity_hu: float = 500.0
    intensity_step_hu: float = 100.0
    body_radius_mm: float = 20.0
    body_hu: float = 40.0
    curvature_mm: float = 3.0
    noise_hu: float = 40.0
    metal_prob: float = 0.0
    metal_hu: float = 3000.0
    centroid_jitter_mm: float = 1.0


def _blob_field(shape, spacing, center_mm, radii_mm):
    """Smooth ellipsoidal bump (raised cosine of the normalized radius)."""
    d, h, w = shape
    z = np.arange(d) * spacing[0] - center_mm[2]
    y = np.arange(h) * spacing[1] - center_mm[1]
    x = np.arange(w) * spacing[2] - center_mm[0]
    r = np.sqrt((z[:, None, None] / radii_mm[2]) ** 2 + (y[None, :, None] / radii_mm[1]) ** 2
                + (x[None, None, :] / radii_mm[0]) ** 2)
    return np.where(r < 1, 0.5 * (1 + np.cos(np.pi * r)), 0.0)


def phantom_centroids(spec, rng):
    """World-mm ``(x, y, z)`` centroids, strictly increasing in z."""
    d, h, w = spec.shape
    sd, sh, sw = spec.spacing
    cx, cy = (w - 1) * sw / 2, (h - 1) * sh / 2
    phase = rng.uniform(0, 2 * np.pi)
    period = rng.uniform(80.0, 160.0)
    z = spec.start_mm + rng.uniform(-spec.start_jitter_mm, spec.start_jitter_mm)
    out = []
    for k in range(spec.num_vertebrae):
        if k:
            z += spec.vertebra_gap_mm + rng.uniform(-spec.gap_jitter_mm, spec.gap_jitter_mm)
        x = cx + spec.curvature_mm * np.sin(2 * np.pi * z / period + phase)
        y = cy + 0.5 * spec.curvature_mm * np.cos(2 * np.pi * z / period + phase)
        j = rng.uniform(-spec.centroid_jitter_mm, spec.centroid_jitter_mm, size=2)
        out.append((x + j[0], y + j[1], z))
    return np.array(out).reshape(-1, 3)


def generate_phantom(spec: PhantomSpec, seed) -> tuple[Volume, LabelSet]:
    rng = np.random.default_rng(seed)
    if spec.first_class + spec.num_vertebrae > len(CLASS_NAMES):
        raise ValueError("phantom class range exceeds the 26 vertebra classes")
    shape = tuple(int(s) for s in spec.shape)
    spacing = tuple(float(s) for s in spec.spacing)
    cents = phantom_centroids(spec, rng)
    extent_mm = np.array([(shape[2] - 1) * spacing[2], (shape[1] - 1) * spacing[1],
                          (shape[0] - 1) * spacing[0]])
    if len(cents) and ((cents < 0).any() or (cents > extent_mm).any()):
        raise ValueError("phantom spec places centroids outside the volume")

    d, h, w = shape
    yy = (np.arange(h) * spacing[1] - (h - 1) * spacing[1] / 2)[:, None]
    xx = (np.arange(w) * spacing[2] - (w - 1) * spacing[2] / 2)[None, :]
    body = (xx ** 2 + yy ** 2) <= spec.body_radius_mm ** 2
    vol = np.where(body[None], spec.body_hu, AIR_HU).astype(np.float64)
    vol = np.broadcast_to(vol, shape).copy()
    for k, c in enumerate(cents):
        cls = spec.first_class + k
        r_xy = spec.radius_mm[0] + cls * spec.radius_step_mm
        radii = (r_xy, 0.8 * r_xy, spec.radius_mm[1])
        amp = spec.intensity_hu + cls * spec.intensity_step_hu - spec.body_hu
        vol += amp * _blob_field(shape, spacing, c, radii)
    if spec.noise_hu > 0:
        vol += rng.normal(0.0, spec.noise_hu, size=shape)
    if spec.metal_prob > 0 and rng.uniform() < spec.metal_prob:
        n_spikes = int(rng.integers(1, 6))
        idx = tuple(rng.integers(0, s, size=n_spikes) for s in shape)
        vol[idx] = spec.metal_hu
    labels = LabelSet([spec.first_class + k for k in range(len(cents))], cents)
    return Volume(vol, spacing, (0.0, 0.0, 0.0)), labels


# -- preprocessing ----------------------------------------------------------------

def preprocess(vol: Volume) -> Volume:
    """Clamp below air (-1000 HU), then z-score over all voxels."""
    data = np.maximum(vol.data.astype(np.float64), AIR_HU)
    mean = float(data.mean())
    std = float(data.std())
    if std == 0.0 or not np.isfinite(std):
        raise ValueError("cannot normalize a constant volume (zero standard deviation)")
    return Volume((data - mean) / std, vol.spacing, vol.origin, (mean, std))


def resample_isotropic(vol: Volume, labels: LabelSet | None = None, target_spacing=2.0):
    """Trilinear resampling onto an isotropic grid sharing the volume origin.

    New extent per axis is ``floor((n - 1) * s / t) + 1``.  Labels live in
    world mm and are returned unchanged.
    """
    t = float(target_spacing)
    if np.allclose(vol.spacing, t, rtol=0, atol=1e-12):
        return Volume(vol.data.copy(), vol.spacing, vol.origin, vol.norm_stats), labels
    new_shape = tuple(int(math.floor((n - 1) * s / t + 1e-9)) + 1
                      for n, s in zip(vol.data.shape, vol.spacing))
    axes = [np.arange(m) * t / s for m, s in zip(new_shape, vol.spacing)]
    coords = np.meshgrid(*axes, indexing="ij")
    out = ndimage.map_coordinates(vol.data.astype(np.float64), coords, order=1, mode="nearest")
    return Volume(out, (t, t, t), vol.origin, vol.norm_stats), labels


# -- cropping --------------------------------------------------------------------

def labels_to_voxels(vol: Volume, labels: LabelSet):
    return vol.world_to_index(labels.centroids_mm)


def crop_target(vol: Volume, labels: LabelSet, corner, crop_shape, num_classes):
    """Presence/centroid target for the crop at ``corner`` (array order)."""
    vox = labels_to_voxels(vol, labels)
    corner_xyz = np.asarray(corner, dtype=np.float64)[::-1]
    hi_xyz = np.asarray(crop_shape, dtype=np.float64)[::-1] - 1
    u = np.zeros(num_classes)
    v = np.zeros((num_classes, 3))
    for cls, p in zip(labels.classes, vox):
        if cls >= num_classes:
            continue
        local = p - corner_xyz
        if np.all(local >= 0) and np.all(local <= hi_xyz):
            u[cls] = 1.0
            v[cls] = local
    return CropTarget(u, v)


def extract_crop(vol: Volume, corner, crop_shape):
    z, y, x = (int(c) for c in corner)
    d, h, w = crop_shape
    data = vol.data[z:z + d, y:y + h, x:x + w]
    origin = tuple(o + s * c for o, s, c in zip(vol.origin, vol.spacing, (z, y, x)))
    return Volume(data.copy(), vol.spacing, origin, vol.norm_stats)


def random_crop(vol: Volume, labels: LabelSet, crop_shape, seed, num_classes=26,
                contain_prob=0.8):
    """Uniform crop corner, biased with ``contain_prob`` to hold at least one centroid.

    ``u_n = 1`` iff centroid ``n`` lies inside the crop's voxel index range.
    The crop corner is recoverable from the crop's ``origin``.
    """
    crop_shape = tuple(int(c) for c in crop_shape)
    if any(c > n for c, n in zip(crop_shape, vol.data.shape)):
        raise ValueError(f"crop {crop_shape} larger than volume {vol.data.shape}")
    if any(c % 8 for c in crop_shape):
        raise ValueError(f"crop extents must be divisible by 8, got {crop_shape}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    max_corner = [n - c for n, c in zip(vol.data.shape, crop_shape)]
    vox = labels_to_voxels(vol, labels)
    corner = None
    if len(labels) and rng.uniform() < contain_prob:
        p = vox[rng.integers(len(labels))][::-1]  # array order
        lo = [max(0, math.ceil(q - (c - 1))) for q, c in zip(p, crop_shape)]
        hi = [min(m, math.floor(q)) for q, m in zip(p, max_corner)]
        if all(a <= b for a, b in zip(lo, hi)):
            corner = tuple(int(rng.integers(a, b + 1)) for a, b in zip(lo, hi))
    if corner is None:
        corner = tuple(int(rng.integers(0, m + 1)) for m in max_corner)
    crop = extract_crop(vol, corner, crop_shape)
    return crop, crop_target(vol, labels, corner, crop_shape, num_classes)


# -- file I/O --------------------------------------------------------------------

def write_volume(path, vol: Volume):
    d, h, w = vol.data.shape
    header = " ".join([str(d), str(h), str(w)] + [repr(float(v)) for v in vol.spacing + vol.origin])
    with open(path, "wb") as f:
        f.write(VOLUME_MAGIC)
        f.write(header.encode("ascii") + b"\n")
        f.write(np.ascontiguousarray(vol.data, dtype="<f4").tobytes())


def read_volume(path) -> Volume:
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(VOLUME_MAGIC):
        raise FormatError(f"{path}: bad magic, not a volume file")
    end = blob.find(b"\n", len(VOLUME_MAGIC))
    if end < 0:
        raise FormatError(f"{path}: truncated header")
    parts = blob[len(VOLUME_MAGIC):end].decode("ascii", "replace").split()
    if len(parts) != 9:
        raise FormatError(f"{path}: header needs 9 fields, got {len(parts)}")
    try:
        d, h, w = (int(p) for p in parts[:3])
        nums = [float(p) for p in parts[3:]]
    except ValueError as exc:
        raise FormatError(f"{path}: unparsable header ({exc})") from None
    if min(d, h, w) <= 0 or max(d, h, w) > MAX_EXTENT:
        raise FormatError(f"{path}: extents {(d, h, w)} out of range")
    payload = blob[end + 1:]
    need = d * h * w * 4
    if len(payload) != need:
        raise FormatError(f"{path}: expected {need} bytes of voxel data, found {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4").reshape(d, h, w).astype(np.float32)
    return Volume(data, tuple(nums[:3]), tuple(nums[3:]))


def write_labels(path, labels: LabelSet):
    with open(path, "w") as f:
        for cls, (x, y, z) in zip(labels.classes, labels.centroids_mm):
            f.write(f"{CLASS_NAMES[cls]} {float(x)!r} {float(y)!r} {float(z)!r}\n")


def read_labels(path) -> LabelSet:
    classes, cents = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4 or parts[0] not in CLASS_INDEX:
                raise FormatError(f"{path}:{lineno}: expected '<class> <x> <y> <z>'")
            try:
                xyz = [float(p) for p in parts[1:]]
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad coordinate") from None
            classes.append(CLASS_INDEX[parts[0]])
            cents.append(xyz)
    return LabelSet(classes, np.array(cents).reshape(-1, 3))


def dump_tensor(path, array, spacing=(2.0, 2.0, 2.0), origin=(0.0, 0.0, 0.0)):
    """Write a 3-D array (or each channel of a 4-D one) in the volume format."""
    array = np.asarray(getattr(array, "data", array))
    if array.ndim == 3:
        write_volume(path, Volume(array, spacing, origin))
        return [path]
    paths = []
    for i, ch in enumerate(array.reshape(-1, *array.shape[-3:])):
        p = f"{path}.{i}"
        write_volume(p, Volume(ch, spacing, origin))
        paths.append(p)
    return paths


def sample_crops(scans, crop_shape, crops_per_scan, seed, num_classes=26, contain_prob=0.8):
    """Fixed list of ``(array, CropTarget)`` crops drawn from ``(Volume, LabelSet)`` scans."""
    rng = np.random.default_rng(seed)
    out = []
    for vol, labels in scans:
        for _ in range(crops_per_scan):
            crop, target = random_crop(vol, labels, crop_shape, rng, num_classes, contain_prob)
            out.append((crop.data, target))
    return out


def phantom_scans(spec: PhantomSpec, seeds, target_spacing=2.0):
    """Generated, normalized and resampled ``(Volume, LabelSet)`` pairs."""
    scans = []
    for s in seeds:
        vol, labels = generate_phantom(spec, s)
        scans.append(resample_isotropic(preprocess(vol), labels, target_spacing))
    return scans
