"""Synthetic CT-like / CBCT-like 2D segmentation phantoms.

A volume is a stack of slices through one randomly deformed elliptical organ
sitting inside an elliptical body with a bright spine and a distractor organ.
Target-domain samples additionally go through :func:`apply_target_shift`.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage

MAGIC = b"TOMDD1"
HEADER = struct.Struct("<6sIII")
MANIFEST_VERSION = 1
SOFT_TISSUE = 0.3


class Domain(str, Enum):
    SOURCE = "source"
    TARGET = "target"


_DOMAIN_CODE = {Domain.SOURCE: 0, Domain.TARGET: 1}


class SpecError(ValueError):
    """Raised for an invalid PhantomSpec / ShiftParams."""


@dataclass(frozen=True)
class ShiftParams:
    fov_radius_fraction: float = 0.85
    bias_field_amplitude: float = 0.25
    vessel_count: int = 4
    vessel_intensity: float = 0.9
    vessel_radius: int = 1
    noise_sigma_source: float = 0.03
    noise_sigma_target: float = 0.06
    # global intensity remaps are off by default: they push target tissue onto the
    # source decision threshold and make target F1 swing wildly between checkpoints
    contrast_gamma_range: tuple[float, float] = (1.0, 1.0)
    # compress intensities towards soft-tissue level (1.0 = untouched)
    dynamic_range: float = 1.0
    streak_count: int = 10
    streak_amplitude: float = 0.25

    @classmethod
    def identity(cls, noise_sigma: float = 0.0) -> "ShiftParams":
        return cls(
            fov_radius_fraction=1.0,
            bias_field_amplitude=0.0,
            vessel_count=0,
            vessel_intensity=0.0,
            vessel_radius=0,
            noise_sigma_source=noise_sigma,
            noise_sigma_target=noise_sigma,
            contrast_gamma_range=(1.0, 1.0),
            dynamic_range=1.0,
            streak_count=0,
            streak_amplitude=0.0,
        )

    def validate(self) -> None:
        if not 0.0 < self.fov_radius_fraction <= 1.0:
            raise SpecError("shift.fov_radius_fraction must be in (0, 1]")
        for name in ("bias_field_amplitude", "vessel_intensity", "noise_sigma_source", "noise_sigma_target",
                     "streak_amplitude"):
            if getattr(self, name) < 0:
                raise SpecError(f"shift.{name} must be >= 0")
        for name in ("vessel_count", "vessel_radius", "streak_count"):
            if getattr(self, name) < 0:
                raise SpecError(f"shift.{name} must be >= 0")
        if not 0.0 < self.dynamic_range <= 1.0:
            raise SpecError("shift.dynamic_range must be in (0, 1]")
        lo, hi = self.contrast_gamma_range
        if not 0 < lo <= hi:
            raise SpecError("shift.contrast_gamma_range must satisfy 0 < lo <= hi")


@dataclass(frozen=True)
class PhantomSpec:
    image_size: int = 64
    num_classes: int = 2
    # organ geometry, in fractions of the image size unless noted
    organ_center_x: tuple[float, float] = (0.30, 0.42)
    organ_center_y: tuple[float, float] = (0.38, 0.50)
    organ_radius: tuple[float, float] = (0.17, 0.24)
    organ_aspect: tuple[float, float] = (0.7, 1.0)
    deformation_amplitude: tuple[float, float] = (0.05, 0.18)
    shift: ShiftParams = field(default_factory=ShiftParams)
    volumes: int = 12
    slices_per_volume: int = 6
    seed: int = 0
    stages: int = 5

    def validate(self) -> None:
        factor = 2 ** (self.stages - 1)
        if self.image_size < 16 or self.image_size % factor:
            raise SpecError(f"image_size must be >= 16 and a multiple of {factor}")
        if self.num_classes < 2:
            raise SpecError("num_classes must be >= 2")
        if self.volumes < 1 or self.slices_per_volume < 1:
            raise SpecError("volumes and slices_per_volume must be >= 1")
        for name in ("organ_center_x", "organ_center_y", "organ_radius", "organ_aspect", "deformation_amplitude"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise SpecError(f"{name} must be an ordered non-negative range")
        self.shift.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown phantom key: {sorted(unknown)[0]}")
        shift = d.pop("shift", {})
        if isinstance(shift, dict):
            sknown = set(ShiftParams.__dataclass_fields__)
            bad = set(shift) - sknown
            if bad:
                raise SpecError(f"unknown phantom key: shift.{sorted(bad)[0]}")
            shift = dict(shift)
            if "contrast_gamma_range" in shift:
                shift["contrast_gamma_range"] = tuple(shift["contrast_gamma_range"])
            shift = ShiftParams(**shift)
        for k, v in d.items():
            if isinstance(v, list):
                d[k] = tuple(v)
        return cls(shift=shift, **d)

    def spec_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray
    domain: Domain
    volume_id: int
    slice_index: int

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ValueError("image and mask must have identical shapes")


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy - c, xx - c


def fov_mask(size: int, fraction: float) -> np.ndarray:
    """True inside the circular field of view of radius ``fraction * size / 2``."""
    yy, xx = _grid(size)
    return np.hypot(yy, xx) <= fraction * size / 2.0


# --------------------------------------------------------------------------- anatomy


@dataclass(frozen=True)
class _VolumeGeometry:
    body_r: tuple[float, float]
    organ_c: tuple[float, float]
    organ_r: float
    organ_aspect: float
    organ_angle: float
    harmonics: np.ndarray  # (n, 3): order, amplitude, phase
    spine_c: tuple[float, float]
    spine_r: float
    extra: list  # per extra class / distractor: (cy, cx, ry, rx, intensity, label)
    tissue: float
    organ_level: float
    drift: np.ndarray  # per-slice phase drift


def _sample_geometry(spec: PhantomSpec, rng: np.random.Generator) -> _VolumeGeometry:
    n = spec.image_size
    u = lambda rg: rng.uniform(*rg)  # noqa: E731
    body_r = (u((0.36, 0.42)) * n, u((0.44, 0.48)) * n)
    organ_c = ((u(spec.organ_center_y) - 0.5) * n, (u(spec.organ_center_x) - 0.5) * n)
    amp = u(spec.deformation_amplitude)
    orders = np.arange(2, 5)
    harm = np.stack([orders, amp * rng.dirichlet(np.ones(len(orders))), rng.uniform(0, 2 * np.pi, len(orders))], 1)
    extra = []
    # distractor: similar intensity, unlabeled, on the other side of the body
    extra.append((u((-0.05, 0.08)) * n, u((0.14, 0.24)) * n, u((0.07, 0.10)) * n, u((0.05, 0.08)) * n,
                  u((0.40, 0.46)), 0))
    for label in range(2, spec.num_classes):
        extra.append((u((0.10, 0.20)) * n, u((0.08, 0.2)) * n, u((0.05, 0.08)) * n, u((0.05, 0.08)) * n,
                      u((0.6, 0.7)), label))
    return _VolumeGeometry(
        body_r=body_r,
        organ_c=organ_c,
        organ_r=u(spec.organ_radius) * n,
        organ_aspect=u(spec.organ_aspect),
        organ_angle=u((-0.6, 0.6)),
        harmonics=harm,
        spine_c=(u((0.28, 0.34)) * n, u((-0.03, 0.03)) * n),
        spine_r=u((0.05, 0.07)) * n,
        extra=extra,
        tissue=u((0.26, 0.32)),
        organ_level=u((0.50, 0.56)),
        drift=rng.normal(0, 0.15, size=(spec.slices_per_volume, len(orders))).cumsum(0),
    )


def _ellipse(yy, xx, cy, cx, ry, rx) -> np.ndarray:
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _organ_region(g: _VolumeGeometry, yy, xx, slice_index: int, n_slices: int) -> np.ndarray:
    t = (slice_index + 0.5) / n_slices
    scale = 0.65 + 0.35 * math.sin(math.pi * t)
    dy, dx = yy - g.organ_c[0], xx - g.organ_c[1]
    ca, sa = math.cos(g.organ_angle), math.sin(g.organ_angle)
    ry_, rx_ = ca * dy - sa * dx, sa * dy + ca * dx
    r = np.hypot(ry_ / g.organ_aspect, rx_)
    theta = np.arctan2(ry_, rx_)
    radius = np.ones_like(theta)
    for (order, a, phase), d in zip(g.harmonics, g.drift[slice_index]):
        radius += a * np.cos(order * theta + phase + d)
    return r <= g.organ_r * scale * radius


def render_clean(spec: PhantomSpec, g: _VolumeGeometry, slice_index: int) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free image and label map for one slice."""
    n = spec.image_size
    yy, xx = _grid(n)
    image = np.zeros((n, n))
    mask = np.zeros((n, n), dtype=np.uint8)
    body = _ellipse(yy, xx, 0.0, 0.0, *g.body_r)
    image[body] = g.tissue
    for cy, cx, ry, rx, level, label in g.extra:
        region = _ellipse(yy, xx, cy, cx, ry, rx) & body
        image[region] = level
        mask[region] = label
    organ = _organ_region(g, yy, xx, slice_index, spec.slices_per_volume) & body
    image[organ] = g.organ_level
    mask[organ] = 1
    spine = _ellipse(yy, xx, *g.spine_c, g.spine_r, g.spine_r)
    image[spine] = 0.9
    mask[spine] = 0
    # partial-volume blur on the image only
    image = ndimage.gaussian_filter(image, 0.7)
    return image, mask


# --------------------------------------------------------------------------- target shift


def _bias_field(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = _grid(size)
    yy, xx = yy / (size / 2), xx / (size / 2)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = math.cos(angle) * xx + math.sin(angle) * yy
    cy, cx = rng.uniform(-0.5, 0.5, 2)
    blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 0.5)
    field_ = rng.uniform(0.3, 1.0) * ramp + rng.choice([-1.0, 1.0]) * blob
    return field_ / np.abs(field_).max()


def _streaks(size: int, count: int, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """Alternating bright/dark thin lines fanning out from a point near the image centre."""
    yy, xx = _grid(size)
    oy, ox = rng.uniform(-0.15, 0.25) * size, rng.uniform(-0.1, 0.1) * size
    out = np.zeros((size, size))
    for i, theta in enumerate(rng.uniform(0, np.pi, count)):
        dist = (yy - oy) * math.cos(theta) - (xx - ox) * math.sin(theta)
        width = rng.uniform(0.6, 1.2)
        out += (1 if i % 2 == 0 else -1) * amplitude * np.exp(-0.5 * (dist / width) ** 2)
    return out


def _vessel_mask(organ: np.ndarray, count: int, rng: np.random.Generator, radius: int = 0) -> np.ndarray:
    """``count`` disjoint curvilinear segments, one per angular sector of the organ."""
    out = np.zeros_like(organ, dtype=bool)
    if count == 0 or not organ.any():
        return out
    interior = ndimage.binary_erosion(organ, iterations=2)
    if not interior.any():
        interior = organ
    ys, xs = np.nonzero(interior)
    cy, cx = ys.mean(), xs.mean()
    extent = np.percentile(np.hypot(ys - cy, xs - cx), 90)
    sector = 2 * np.pi / count
    base = rng.uniform(0, 2 * np.pi)
    size = organ.shape[0]
    for i in range(count):
        theta0 = base + i * sector
        bend = rng.uniform(-0.25, 0.25) * sector
        for t in np.linspace(0.35, 0.95, 48):
            theta = theta0 + bend * math.sin(math.pi * t)
            y = cy + t * extent * math.sin(theta)
            x = cx + t * extent * math.cos(theta)
            iy, ix = int(round(y)), int(round(x))
            if 0 <= iy < size and 0 <= ix < size:
                out[iy, ix] = True
    if radius > 0:
        out = ndimage.binary_dilation(out, iterations=radius)
    return out & interior


def apply_target_shift(image: np.ndarray, mask: np.ndarray, p: ShiftParams,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Apply the CBCT-like degradation pipeline to one clean slice.

    Order: bias field, vessels, gamma remap, dynamic-range compression, streaks
    (inside the body), noise, FOV truncation, clip.
    """
    p.validate()
    if image.shape != mask.shape or image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ValueError("image and mask must be equal square 2D arrays")
    out = np.asarray(image, dtype=np.float64).copy()
    mask = np.asarray(mask).copy()
    n = out.shape[0]

    if p.bias_field_amplitude > 0:
        out = out * (1.0 + p.bias_field_amplitude * _bias_field(n, rng))
    if p.vessel_count > 0:
        vessels = _vessel_mask(mask == 1, p.vessel_count, rng, p.vessel_radius)
        out[vessels] = p.vessel_intensity
    lo, hi = p.contrast_gamma_range
    if (lo, hi) != (1.0, 1.0):
        out = np.clip(out, 0.0, None) ** rng.uniform(lo, hi)
    if p.dynamic_range < 1.0:
        out = SOFT_TISSUE + p.dynamic_range * (out - SOFT_TISSUE)
    if p.streak_count > 0 and p.streak_amplitude > 0:
        body = out > 0.05
        out = out + body * _streaks(n, p.streak_count, p.streak_amplitude, rng)
    if p.noise_sigma_target > 0:
        out = out + rng.normal(0.0, p.noise_sigma_target, out.shape)
    if p.fov_radius_fraction < 1.0:
        inside = fov_mask(n, p.fov_radius_fraction)
        out[~inside] = 0.0
        mask[~inside] = 0
    return np.clip(out, 0.0, 1.0), mask


# --------------------------------------------------------------------------- generation


def generate_volume(spec: PhantomSpec, domain: Domain | str, volume_id: int) -> list[Sample]:
    """All slices of one volume; depends only on (spec, domain, volume_id)."""
    domain = Domain(domain)
    g = _sample_geometry(spec, _rng(spec.seed, volume_id))
    noise_rng = _rng(spec.seed, volume_id, 2)
    shift_rng = _rng(spec.seed, volume_id, 1)
    samples = []
    for s in range(spec.slices_per_volume):
        clean, mask = render_clean(spec, g, s)
        if domain is Domain.SOURCE:
            image = np.clip(clean + noise_rng.normal(0.0, spec.shift.noise_sigma_source, clean.shape), 0, 1)
        else:
            image, mask = apply_target_shift(clean, mask, spec.shift, shift_rng)
        samples.append(Sample(image.astype(np.float32), mask.astype(np.uint8), domain, volume_id, s))
    return samples


def split_volumes(volume_ids, seed: int) -> dict[str, list[int]]:
    """Volume-level split: 1/3 test, 1/6 val, rest train."""
    ids = sorted(int(v) for v in volume_ids)
    perm = _rng(seed, 7).permutation(len(ids))
    n = len(ids)
    n_test = max(1, round(n / 3)) if n >= 3 else 0
    n_val = max(1, round(n / 6)) if n >= 6 else 0
    test = sorted(ids[i] for i in perm[:n_test])
    val = sorted(ids[i] for i in perm[n_test:n_test + n_val])
    train = sorted(ids[i] for i in perm[n_test + n_val:])
    return {"train": train, "val": val, "test": test}


def write_sample(path: Path, sample: Sample, num_classes: int) -> None:
    h, w = sample.image.shape
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, h, w, num_classes))
        fh.write(np.ascontiguousarray(sample.image, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(sample.mask, dtype=np.uint8).tobytes())


def read_sample(path: Path) -> tuple[np.ndarray, np.ndarray, int]:
    raw = Path(path).read_bytes()
    magic, h, w, k = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    off = HEADER.size
    image = np.frombuffer(raw, dtype="<f4", count=h * w, offset=off).reshape(h, w)
    mask = np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=off + 4 * h * w).reshape(h, w)
    return image.astype(np.float32), mask.copy(), k


def generate_dataset(spec: PhantomSpec, domain: Domain | str, out_dir: str | Path) -> dict:
    """Write ``volumes * slices_per_volume`` samples plus ``manifest.json``; return the manifest."""
    spec.validate()
    domain = Domain(domain)
    out_dir = Path(out_dir)
    (out_dir / "samples").mkdir(parents=True, exist_ok=True)
    volumes: dict[str, list[str]] = {}
    for v in range(spec.volumes):
        files = []
        for sample in generate_volume(spec, domain, v):
            rel = f"samples/{v:04d}_{sample.slice_index:03d}.bin"
            write_sample(out_dir / rel, sample, spec.num_classes)
            files.append(rel)
        volumes[str(v)] = files
    manifest = {
        "format_version": MANIFEST_VERSION,
        "domain": domain.value,
        "seed": spec.seed,
        "spec": spec.to_dict(),
        "spec_hash": spec.spec_hash(),
        "image_size": spec.image_size,
        "num_classes": spec.num_classes,
        "volumes": volumes,
        "splits": split_volumes(range(spec.volumes), spec.seed),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_manifest(data_dir: str | Path) -> dict:
    return json.loads((Path(data_dir) / "manifest.json").read_text())


# --------------------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentConfig:
    p_rotate: float = 0.5
    p_zoom: float = 0.5
    p_flip: float = 0.5
    p_contrast: float = 0.5
    p_noise: float = 0.5
    max_rotation_deg: float = 15.0
    zoom_range: tuple[float, float] = (0.9, 1.1)
    contrast_range: tuple[float, float] = (0.85, 1.15)
    noise_sigma: float = 0.02

    @classmethod
    def off(cls, **kw) -> "AugmentConfig":
        return replace(cls(p_rotate=0, p_zoom=0, p_flip=0, p_contrast=0, p_noise=0), **kw)


def affine_warp(image: np.ndarray, mask: np.ndarray, angle_deg: float = 0.0, zoom: float = 1.0,
                flip: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Rotate/zoom about the image centre (and optionally flip left-right).

    Image uses linear interpolation, mask nearest-neighbour, so labels stay integral.
    """
    if flip:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if angle_deg == 0.0 and zoom == 1.0:
        return np.ascontiguousarray(image), np.ascontiguousarray(mask)
    a = math.radians(angle_deg)
    # output -> input coordinate map
    mat = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]]) / zoom
    c = (np.array(image.shape) - 1) / 2.0
    offset = c - mat @ c
    img = ndimage.affine_transform(image, mat, offset=offset, order=1, mode="constant", cval=0.0)
    msk = ndimage.affine_transform(mask, mat, offset=offset, order=0, mode="constant", cval=0)
    return img.astype(image.dtype), msk.astype(mask.dtype)


def augment(sample: Sample, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> Sample:
    """Random rotation, zoom, flip (image+mask) then contrast and noise (image only)."""
    angle = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg) if rng.random() < cfg.p_rotate else 0.0
    zoom = rng.uniform(*cfg.zoom_range) if rng.random() < cfg.p_zoom else 1.0
    flip = bool(rng.random() < cfg.p_flip)
    image, mask = affine_warp(sample.image, sample.mask, angle, zoom, flip)
    if rng.random() < cfg.p_contrast:
        image = np.clip(image, 0, 1) ** rng.uniform(*cfg.contrast_range)
    if rng.random() < cfg.p_noise:
        image = image + rng.normal(0.0, cfg.noise_sigma, image.shape)
    if image is not sample.image:
        image = np.clip(image, 0, 1).astype(np.float32)
    return replace(sample, image=image, mask=mask)
