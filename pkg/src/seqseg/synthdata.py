"""Procedural pancreas-like volumes, 3-slice network inputs and the SVOL file format.

The organ is an elliptic tube swept along the axial axis: its in-plane
centre, orientation and semi-axes follow smooth random walks, so each axial
slice shows an elongated blob that drifts and bends slowly from slice to
slice. Distractor ellipsoids carry the foreground intensity but never touch
the organ.

SVOL layout (all little-endian)::

    offset  size  field
    0       4     magic b"SVOL"
    4       2     format version (u16, currently 1)
    6       2     dtype tag (u16): 1 = f64, 2 = u8 binary
    8       12    dims D, H, W (3 x u32)
    20      24    spacing sz, sy, sx in mm (3 x f64)
    44      4     CRC32 of the payload (u32)
    48      ...   payload, row-major with W fastest
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.interpolate import CubicSpline

MAGIC = b"SVOL"
FORMAT_VERSION = 1
DTYPE_F64 = 1
DTYPE_U8 = 2
_HEADER = struct.Struct("<4sHH3I3dI")
HEADER_SIZE = _HEADER.size

CT_SPACING = (2.5, 1.0, 1.0)
MRI_SPACING = (7.0, 1.0, 1.0)


class FormatError(ValueError):
    """Malformed SVOL file."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class GenerationError(ValueError):
    """The requested organ geometry does not fit the volume."""


@dataclass
class Volume:
    voxels: np.ndarray
    spacing_mm: tuple[float, float, float] = CT_SPACING

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float64)
        _validate(self.voxels, self.spacing_mm)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)


@dataclass
class MaskVolume:
    voxels: np.ndarray
    spacing_mm: tuple[float, float, float] = CT_SPACING

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if not np.isin(v, (0, 1)).all():
            raise ValueError("mask voxels must be 0 or 1")
        self.voxels = v.astype(np.uint8)
        _validate(self.voxels, self.spacing_mm)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)


def _validate(vox: np.ndarray, spacing) -> None:
    if vox.ndim != 3 or min(vox.shape) < 1:
        raise ValueError(f"volume must be 3-D with positive extents, got shape {vox.shape}")
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ValueError(f"spacing must be three positive values, got {spacing}")


@dataclass
class GenConfig:
    dims: tuple[int, int, int] = (16, 64, 64)
    spacing_mm: tuple[float, float, float] = CT_SPACING
    centerline_steps: int = 5
    radius_range: tuple[float, float] = (3.0, 5.0)
    elongation_range: tuple[float, float] = (2.0, 3.0)
    drift_sigma: float = 0.6
    fg_mean: float = 0.6
    bg_mean: float = 0.3
    noise_sigma: float = 0.12
    distractors: int = 4
    distractor_radius: tuple[float, float] = (2.0, 4.0)
    axial_coverage: tuple[float, float] = (0.75, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ValueError(f"invalid radius range {self.radius_range}")
        if self.centerline_steps < 2:
            raise ValueError("centerline_steps must be >= 2")


def ct_config(seed: int = 0, **overrides) -> GenConfig:
    return GenConfig(seed=seed, **overrides)


def mri_config(seed: int = 0, **overrides) -> GenConfig:
    return GenConfig(spacing_mm=MRI_SPACING, drift_sigma=2.0, seed=seed, **overrides)


def _smooth_walk(rng: np.random.Generator, start: float, sigma: float, knots: np.ndarray,
                 at: np.ndarray) -> np.ndarray:
    values = start + np.concatenate([[0.0], np.cumsum(rng.normal(0.0, sigma, len(knots) - 1))])
    return CubicSpline(knots, values, bc_type="natural")(at)


def _organ_mask(cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    d, h, w = cfg.dims
    rlo, rhi = cfg.radius_range
    elo, ehi = cfg.elongation_range
    max_major = rhi * ehi
    margin = max_major + 1.0
    if 2 * margin >= min(h, w):
        raise GenerationError(f"tube with major semi-axis up to {max_major:.1f} voxels cannot fit in {h}x{w} slices")
    cov = rng.uniform(*cfg.axial_coverage)
    length = max(2, int(round(cov * d)))
    z0 = int(rng.integers(0, d - length + 1))
    zs = np.arange(z0, z0 + length, dtype=np.float64)
    knots = np.linspace(z0, z0 + length - 1, cfg.centerline_steps)
    # walk step per knot, scaled so the per-slice drift is ~drift_sigma/spacing
    per_knot = cfg.drift_sigma * np.sqrt(max(1.0, (length - 1) / (cfg.centerline_steps - 1)))
    cy = _smooth_walk(rng, rng.uniform(margin, h - margin), per_knot / cfg.spacing_mm[1], knots, zs)
    cx = _smooth_walk(rng, rng.uniform(margin, w - margin), per_knot / cfg.spacing_mm[2], knots, zs)
    theta = _smooth_walk(rng, rng.uniform(0, np.pi), 0.15, knots, zs)
    minor = np.clip(_smooth_walk(rng, rng.uniform(rlo, rhi), 0.3, knots, zs), rlo, rhi)
    major = minor * np.clip(_smooth_walk(rng, rng.uniform(elo, ehi), 0.15, knots, zs), elo, ehi)
    cy = np.clip(cy, margin, h - 1 - margin)
    cx = np.clip(cx, margin, w - 1 - margin)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    mask = np.zeros(cfg.dims, dtype=bool)
    for i, z in enumerate(range(z0, z0 + length)):
        dy, dx = yy - cy[i], xx - cx[i]
        u = dy * np.cos(theta[i]) + dx * np.sin(theta[i])
        v = -dy * np.sin(theta[i]) + dx * np.cos(theta[i])
        mask[z] = (u / major[i]) ** 2 + (v / minor[i]) ** 2 <= 1.0
    return mask


def _place_distractors(cfg: GenConfig, rng: np.random.Generator, organ: np.ndarray) -> np.ndarray:
    d, h, w = cfg.dims
    keep_out = ndimage.binary_dilation(organ, structure=ndimage.generate_binary_structure(3, 1), iterations=2)
    zz, yy, xx = np.mgrid[0:d, 0:h, 0:w].astype(np.float64)
    blobs = np.zeros(cfg.dims, dtype=bool)
    sz = cfg.spacing_mm[0]
    for _ in range(cfg.distractors):
        for _attempt in range(50):
            r = rng.uniform(*cfg.distractor_radius, size=2)
            rz = rng.uniform(*cfg.distractor_radius) * cfg.spacing_mm[1] / sz * 1.5
            c = (rng.uniform(0, d - 1), rng.uniform(r[0], h - 1 - r[0]), rng.uniform(r[1], w - 1 - r[1]))
            blob = ((zz - c[0]) / max(rz, 0.5)) ** 2 + ((yy - c[1]) / r[0]) ** 2 + ((xx - c[2]) / r[1]) ** 2 <= 1.0
            if blob.any() and not (blob & keep_out).any():
                blobs |= blob
                break
    return blobs


def generate_case(config: GenConfig) -> tuple[Volume, MaskVolume]:
    """Deterministic (image, mask) pair for ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    organ = _organ_mask(config, rng)
    blobs = _place_distractors(config, rng, organ)
    image = np.full(config.dims, config.bg_mean)
    image[organ | blobs] = config.fg_mean
    if config.noise_sigma > 0:
        image += rng.normal(0.0, config.noise_sigma, size=config.dims)
    np.clip(image, 0.0, 1.0, out=image)
    spacing = tuple(float(s) for s in config.spacing_mm)
    return Volume(image, spacing), MaskVolume(organ.astype(np.uint8), spacing)


def generate_suite(count: int, base: GenConfig | None = None, seed: int = 0) -> list[tuple[Volume, MaskVolume]]:
    """``count`` cases whose seeds are ``seed, seed+1, ...``."""
    base = base or GenConfig()
    return [generate_case(replace(base, seed=seed + i)) for i in range(count)]


def slice_triplets(volume: Volume | np.ndarray, tau: int) -> np.ndarray:
    """Slices (tau-1, tau, tau+1) as a ``[3, H, W]`` array, replicating edge slices."""
    vox = volume.voxels if isinstance(volume, (Volume, MaskVolume)) else np.asarray(volume)
    d = vox.shape[0]
    if not 0 <= tau < d:
        raise IndexError(f"slice index {tau} outside 0..{d - 1}")
    idx = [max(tau - 1, 0), tau, min(tau + 1, d - 1)]
    return np.asarray(vox[idx], dtype=np.float64)


def volume_triplets(volume: Volume | np.ndarray) -> np.ndarray:
    """All ``slice_triplets`` of a volume stacked to ``[D, 3, H, W]``."""
    vox = volume.voxels if isinstance(volume, (Volume, MaskVolume)) else np.asarray(volume)
    return np.stack([slice_triplets(vox, t) for t in range(vox.shape[0])])


def perturb_sequence(prob, drop_indices: Sequence[int], mode: str = "zero") -> np.ndarray:
    """Copy of a ``[T, ...]`` probability sequence with listed slices zeroed or halved."""
    out = np.array(prob, dtype=np.float64, copy=True)
    t = out.shape[0]
    if mode not in ("zero", "halve"):
        raise ValueError(f"unknown perturbation mode {mode!r}")
    for i in drop_indices:
        if not 0 <= i < t:
            raise IndexError(f"drop index {i} outside 0..{t - 1}")
        out[i] = 0.0 if mode == "zero" else out[i] * 0.5
    return out


# --------------------------------------------------------------------------
# SVOL files

def encode_volume(vol: Volume | MaskVolume) -> bytes:
    if isinstance(vol, MaskVolume):
        tag, payload = DTYPE_U8, np.ascontiguousarray(vol.voxels, dtype=np.uint8).tobytes()
    else:
        tag, payload = DTYPE_F64, np.ascontiguousarray(vol.voxels, dtype="<f8").tobytes()
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, tag, *vol.dims, *map(float, vol.spacing_mm),
                          zlib.crc32(payload) & 0xFFFFFFFF)
    return header + payload


def decode_volume(raw: bytes) -> Volume | MaskVolume:
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"file is {len(raw)} bytes, shorter than the {HEADER_SIZE}-byte header", len(raw))
    magic, version, tag, d, h, w, sz, sy, sx, crc = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    if tag not in (DTYPE_F64, DTYPE_U8):
        raise FormatError(f"unknown dtype tag {tag}", 6)
    if min(d, h, w) < 1:
        raise FormatError(f"non-positive dims {(d, h, w)}", 8)
    if not all(np.isfinite(s) and s > 0 for s in (sz, sy, sx)):
        raise FormatError(f"invalid spacing {(sz, sy, sx)}", 20)
    itemsize = 8 if tag == DTYPE_F64 else 1
    expected = d * h * w * itemsize
    payload = raw[HEADER_SIZE:]
    if len(payload) != expected:
        raise FormatError(f"payload is {len(payload)} bytes, dims {(d, h, w)} require {expected}", HEADER_SIZE)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise FormatError("payload checksum mismatch", 44)
    spacing = (sz, sy, sx)
    if tag == DTYPE_F64:
        return Volume(np.frombuffer(payload, dtype="<f8").reshape(d, h, w).astype(np.float64), spacing)
    vox = np.frombuffer(payload, dtype=np.uint8).reshape(d, h, w)
    bad = np.flatnonzero(vox > 1)
    if bad.size:
        raise FormatError(f"binary payload holds value {int(vox.reshape(-1)[bad[0]])}", HEADER_SIZE + int(bad[0]))
    return MaskVolume(vox.copy(), spacing)


def write_volume(path, vol: Volume | MaskVolume) -> None:
    Path(path).write_bytes(encode_volume(vol))


def read_volume(path) -> Volume | MaskVolume:
    return decode_volume(Path(path).read_bytes())


def save_dataset(directory, cases: Sequence[tuple[Volume, MaskVolume]], start: int = 0) -> list[Path]:
    """Write ``case_NNN_image.svol`` / ``case_NNN_mask.svol`` pairs."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, (img, mask) in enumerate(cases, start=start):
        for kind, vol in (("image", img), ("mask", mask)):
            p = out / f"case_{i:03d}_{kind}.svol"
            write_volume(p, vol)
            written.append(p)
    return written


def load_dataset(directory) -> list[tuple[str, Volume, MaskVolume]]:
    """Read every image/mask pair in ``directory`` in case-id order."""
    root = Path(directory)
    images = sorted(root.glob("*_image.svol"))
    if not images:
        raise FileNotFoundError(f"no *_image.svol files in {root}")
    cases = []
    for img_path in images:
        case_id = img_path.name[: -len("_image.svol")]
        mask_path = root / f"{case_id}_mask.svol"
        if not mask_path.exists():
            raise FileNotFoundError(f"missing mask for {case_id}: {mask_path}")
        img, mask = read_volume(img_path), read_volume(mask_path)
        if not isinstance(img, Volume) or not isinstance(mask, MaskVolume):
            raise FormatError(f"{case_id}: image/mask dtype tags swapped", 6)
        if img.dims != mask.dims:
            raise ValueError(f"{case_id}: image dims {img.dims} != mask dims {mask.dims}")
        cases.append((case_id, img, mask))
    return cases

