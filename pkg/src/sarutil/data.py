"""Synthetic oriented-target chips, corruptions, manifests and preprocessing.

Images are single-channel linear amplitude grids. A synthetic chip keeps the
noise-free scene it was rendered from (``TargetImage.scene``) so corruptions
can re-render the same speckle realisation with modified content.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter
from scipy.special import expit

from .errors import (
    DanglingReference,
    DuplicateId,
    InvalidArgument,
    MalformedRecord,
    ManifestNotFound,
)

LOG_K = 255.0
PNG_SCALE = 65535
_U64 = (1 << 64) - 1


class Source(str, enum.Enum):
    REAL = "real"
    SIMULATED = "simulated"
    COUNTERFACTUAL = "counterfactual"


SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# azimuth encoding


def encode_azimuth(theta_deg):
    """Map an angle in degrees to ``[cos, sin]``; arrays broadcast."""
    t = np.deg2rad(np.mod(np.asarray(theta_deg, dtype=np.float64), 360.0))
    return np.stack([np.cos(t), np.sin(t)], axis=-1)


def decode_azimuth(v):
    """Inverse of :func:`encode_azimuth`; ``v`` need not be unit norm."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != 2:
        raise InvalidArgument(f"azimuth vector must have 2 components, got {v.shape}")
    norm = np.hypot(v[..., 0], v[..., 1])
    if np.any(norm == 0):
        raise InvalidArgument("cannot decode the zero vector to an azimuth")
    deg = np.rad2deg(np.arctan2(v[..., 1], v[..., 0]))
    deg = np.mod(deg, 360.0)
    # mod can return exactly 360.0 for tiny negative inputs
    deg = np.where(deg >= 360.0, 0.0, deg)
    return float(deg) if deg.ndim == 0 else deg


# ---------------------------------------------------------------------------
# scene description and rendering


@dataclass(frozen=True, eq=False)
class ClassTemplate:
    """Scatterer layout of one class in the target frame (pixels, x along the hull)."""

    name: str
    points: np.ndarray
    amplitudes: np.ndarray
    body_length: float
    body_width: float

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        amp = np.asarray(self.amplitudes, dtype=np.float64).reshape(-1)
        if len(pts) != len(amp) or len(pts) == 0:
            raise InvalidArgument(f"template {self.name!r}: points/amplitudes mismatch")
        if np.any(amp < 0):
            raise InvalidArgument(f"template {self.name!r}: negative amplitude")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "amplitudes", amp)


@dataclass(frozen=True, eq=False)
class SynthSpec:
    templates: tuple
    speckle_looks: float = 4
    background_level: float = 0.04
    image_size: int = 40
    seed: int = 0
    body_level: float = 0.12
    psf_sigma: float = 0.8
    clutter_level: float = 0.12

    def __post_init__(self):
        object.__setattr__(self, "templates", tuple(self.templates))
        if not self.templates:
            raise InvalidArgument("at least one class template is required")
        if self.speckle_looks < 1:
            raise InvalidArgument("speckle_looks must be >= 1")
        if self.background_level < 0:
            raise InvalidArgument("background_level must be >= 0")
        for i, a in enumerate(self.templates):
            for b in self.templates[i + 1:]:
                if _same_template(a, b):
                    raise InvalidArgument(f"templates {a.name!r} and {b.name!r} are identical")

    @property
    def n_classes(self):
        return len(self.templates)

    @property
    def class_names(self):
        return [t.name for t in self.templates]


def _same_template(a, b):
    return (
        a.points.shape == b.points.shape
        and np.allclose(a.points, b.points)
        and np.allclose(a.amplitudes, b.amplitudes)
        and math.isclose(a.body_length, b.body_length)
        and math.isclose(a.body_width, b.body_width)
    )


def default_templates(n_classes=4, seed=0):
    """Random, well separated class templates.

    Hull lengths and widths are spread over a fixed range so classes differ in
    footprint as well as in scatterer layout. Every template gets a bright
    marker near the bow so that opposite headings are distinguishable.
    """
    rng = np.random.default_rng([seed & _U64, 0x7E3])
    lengths = rng.permutation(np.linspace(10.0, 19.0, n_classes))
    widths = rng.permutation(np.linspace(4.5, 9.0, n_classes))
    templates = []
    for c in range(n_classes):
        length, width = lengths[c], widths[c]
        k = 3 + c % 5
        xs = rng.uniform(-0.45, 0.3, k) * length
        ys = rng.uniform(-0.4, 0.4, k) * width
        amps = rng.uniform(0.3, 0.75, k)
        bow = np.array([[0.42 * length, rng.uniform(-0.2, 0.2) * width]])
        points = np.concatenate([bow, np.stack([xs, ys], axis=1)])
        amplitudes = np.concatenate([[rng.uniform(0.85, 1.0)], amps])
        templates.append(
            ClassTemplate(f"class_{c}", points, amplitudes, float(length), float(width))
        )
    return tuple(templates)


@dataclass(frozen=True, eq=False)
class Scene:
    """Noise-free content of one chip plus the speckle seed used to render it.

    ``points`` are image-plane offsets from the chip centre with x to the right
    and y upwards.
    """

    size: int
    points: np.ndarray
    amplitudes: np.ndarray
    body_azimuth_deg: float
    body_length: float
    body_width: float
    body_level: float
    background: object  # scalar level or an HxW field
    psf_sigma: float
    speckle_looks: float
    speckle_seed: tuple


def _rotate(points, theta_deg):
    t = math.radians(theta_deg)
    c, s = math.cos(t), math.sin(t)
    rot = np.array([[c, -s], [s, c]])
    return points @ rot.T


def _plane_grid(size):
    ctr = (size - 1) / 2.0
    idx = np.arange(size, dtype=np.float64)
    x = idx[None, :] - ctr
    y = ctr - idx[:, None]
    return np.broadcast_to(x, (size, size)), np.broadcast_to(y, (size, size))


def render_components(scene):
    """Return ``(background, body, scatterers)`` noise-free layers."""
    x, y = _plane_grid(scene.size)
    t = math.radians(scene.body_azimuth_deg)
    u = x * math.cos(t) + y * math.sin(t)
    v = -x * math.sin(t) + y * math.cos(t)
    edge = 0.5
    body = scene.body_level * (
        expit((scene.body_length / 2 - np.abs(u)) / edge)
        * expit((scene.body_width / 2 - np.abs(v)) / edge)
    )
    scat = np.zeros((scene.size, scene.size))
    two_s2 = 2.0 * scene.psf_sigma ** 2
    for (px, py), a in zip(scene.points, scene.amplitudes):
        if a == 0:
            continue
        scat += a * np.exp(-((x - px) ** 2 + (y - py) ** 2) / two_s2)
    bg = np.broadcast_to(np.asarray(scene.background, dtype=np.float64), (scene.size, scene.size))
    return bg, body, scat


def speckle_field(scene):
    rng = np.random.default_rng(list(scene.speckle_seed))
    looks = float(scene.speckle_looks)
    return rng.gamma(looks, 1.0 / looks, size=(scene.size, scene.size))


def render(scene, speckle=True):
    bg, body, scat = render_components(scene)
    img = bg + body + scat
    if speckle:
        img = img * speckle_field(scene)
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# target image


@dataclass(frozen=True, eq=False)
class TargetImage:
    pixels: np.ndarray
    class_id: int
    azimuth_deg: float
    source: Source = Source.REAL
    id: str = ""
    scene: Scene | None = field(default=None, repr=False)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.shape[0] != px.shape[1]:
            raise InvalidArgument(f"image {self.id!r} must be square, got {px.shape}")
        if not np.all(np.isfinite(px)) or np.any(px < 0):
            raise InvalidArgument(f"image {self.id!r} has negative or non-finite pixels")
        if not 0.0 <= self.azimuth_deg < 360.0:
            raise InvalidArgument(f"image {self.id!r}: azimuth {self.azimuth_deg} outside [0, 360)")
        if self.class_id < 0:
            raise InvalidArgument(f"image {self.id!r}: negative class id")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "source", Source(self.source))


def synth_scene(spec, class_id, azimuth_deg, seed):
    if not 0 <= class_id < spec.n_classes:
        raise InvalidArgument(f"unknown class_id {class_id} (spec has {spec.n_classes} classes)")
    az = float(np.mod(azimuth_deg, 360.0))
    tpl = spec.templates[class_id]
    return Scene(
        size=spec.image_size,
        points=_rotate(tpl.points, az),
        amplitudes=tpl.amplitudes.copy(),
        body_azimuth_deg=az,
        body_length=tpl.body_length,
        body_width=tpl.body_width,
        body_level=spec.body_level,
        background=float(spec.background_level),
        psf_sigma=spec.psf_sigma,
        speckle_looks=spec.speckle_looks,
        speckle_seed=(spec.seed & _U64, int(seed) & _U64),
    )


def synth_target(spec, class_id, azimuth_deg, seed, source=Source.REAL, id=None):
    scene = synth_scene(spec, class_id, azimuth_deg, seed)
    az = scene.body_azimuth_deg
    if az >= 360.0:
        az = 0.0
    return TargetImage(
        pixels=render(scene),
        class_id=class_id,
        azimuth_deg=az,
        source=source,
        id=id if id is not None else f"c{class_id}-a{az:.2f}-s{seed}",
        scene=scene,
    )


# ---------------------------------------------------------------------------
# corruptions


class CorruptionKind(str, enum.Enum):
    CLUTTER_SWAP = "clutter_swap"
    SCATTERER_DROPOUT = "scatterer_dropout"
    SCATTERER_SHIFT = "scatterer_shift"
    ANGLE_JITTER = "angle_jitter"


# clutter_swap: blend weight toward foreign clutter; dropout: fraction of
# scatterers removed; shift: displacement radius in pixels; jitter: degrees.
MAX_MAGNITUDE = {
    CorruptionKind.CLUTTER_SWAP: 1.0,
    CorruptionKind.SCATTERER_DROPOUT: 1.0,
    CorruptionKind.SCATTERER_SHIFT: 6.0,
    CorruptionKind.ANGLE_JITTER: 180.0,
}


@dataclass(frozen=True)
class CorruptionSpec:
    kind: CorruptionKind
    magnitude: float

    def __post_init__(self):
        kind = CorruptionKind(self.kind)
        object.__setattr__(self, "kind", kind)
        hi = MAX_MAGNITUDE[kind]
        if not 0.0 <= self.magnitude <= hi:
            raise InvalidArgument(f"{kind.value} magnitude {self.magnitude} outside [0, {hi}]")


def clutter_field(size, seed, level, psf_sigma=0.8):
    """Spatially correlated log-normal clutter with sparse bright returns."""
    rng = np.random.default_rng([int(seed) & _U64, 0xC1])
    g = gaussian_filter(rng.standard_normal((size, size)), 2.0, mode="wrap")
    g /= g.std()
    field_ = level * np.exp(0.5 * g - 0.125)
    spikes = np.where(rng.random((size, size)) < 0.012, rng.uniform(0.2, 0.5, (size, size)), 0.0)
    spikes = gaussian_filter(spikes, psf_sigma, mode="constant") * (2 * math.pi * psf_sigma ** 2)
    return field_ + spikes


def corrupt(image, spec, seed, clutter_level=None):
    """Apply a content defect while keeping the metadata (class, azimuth) intact."""
    if not isinstance(spec, CorruptionSpec):
        spec = CorruptionSpec(**spec)
    if image.scene is None:
        raise InvalidArgument(f"image {image.id!r} carries no scene; only synthetic chips can be corrupted")
    scene = image.scene
    m = float(spec.magnitude)
    rng = np.random.default_rng([int(seed) & _U64, list(CorruptionKind).index(spec.kind)])
    if m == 0.0:
        new = scene
    elif spec.kind is CorruptionKind.CLUTTER_SWAP:
        level = clutter_level if clutter_level is not None else 3.0 * max(float(np.mean(scene.background)), 0.01)
        alt = clutter_field(scene.size, int(rng.integers(0, 2**63)), level, scene.psf_sigma)
        new = replace(scene, background=(1.0 - m) * np.asarray(scene.background) + m * alt)
    elif spec.kind is CorruptionKind.SCATTERER_DROPOUT:
        k = len(scene.amplitudes)
        n_drop = min(k, max(1, math.ceil(m * k)))
        amps = scene.amplitudes.copy()
        amps[rng.choice(k, n_drop, replace=False)] = 0.0
        new = replace(scene, amplitudes=amps)
    elif spec.kind is CorruptionKind.SCATTERER_SHIFT:
        phi = rng.uniform(0.0, 2 * math.pi, len(scene.points))
        offs = m * np.stack([np.cos(phi), np.sin(phi)], axis=1)
        new = replace(scene, points=scene.points + offs)
    else:
        # scatterers rendered at the wrong heading, hull left at the labelled one
        new = replace(scene, points=_rotate(scene.points, m))
    pixels = image.pixels.copy() if new is scene else render(new)
    return TargetImage(
        pixels=pixels,
        class_id=image.class_id,
        azimuth_deg=image.azimuth_deg,
        source=Source.SIMULATED,
        id=f"{image.id}+{spec.kind.value}",
        scene=new,
    )


# ---------------------------------------------------------------------------
# preprocessing


@dataclass(frozen=True)
class PreprocessConfig:
    crop_size: int = 88
    log_transform: bool = True
    stretch_range: tuple = (0.8, 1.2)
    augment: bool = False

    def __post_init__(self):
        lo, hi = self.stretch_range
        object.__setattr__(self, "stretch_range", (float(lo), float(hi)))
        if not 0 < lo <= hi:
            raise InvalidArgument(f"stretch_range must satisfy 0 < lo <= hi, got {self.stretch_range}")
        if self.crop_size < 1:
            raise InvalidArgument("crop_size must be positive")


def center_crop(pixels, size):
    h, w = pixels.shape[-2:]
    if size > min(h, w):
        raise InvalidArgument(f"crop {size} larger than image {h}x{w}")
    r0, c0 = (h - size) // 2, (w - size) // 2
    return pixels[..., r0:r0 + size, c0:c0 + size]


def log_compress(pixels):
    return np.log1p(np.asarray(pixels) * LOG_K) / math.log1p(LOG_K)


def log_expand(values):
    """Inverse of :func:`log_compress`."""
    return np.expm1(np.asarray(values) * math.log1p(LOG_K)) / LOG_K


def stretch_factor(cfg, seed):
    lo, hi = cfg.stretch_range
    return float(np.random.default_rng([int(seed) & _U64, 0x57]).uniform(lo, hi))


def preprocess(image, cfg, seed=None):
    """Centre-crop, optional log compression and optional random gain."""
    pixels = image.pixels if isinstance(image, TargetImage) else np.asarray(image, dtype=np.float64)
    out = center_crop(pixels, cfg.crop_size)
    if cfg.log_transform:
        out = log_compress(out)
    else:
        out = out.copy()
    if cfg.augment:
        if seed is None:
            raise InvalidArgument("augment=True needs an explicit seed")
        out = out * stretch_factor(cfg, seed)
    return out


# ---------------------------------------------------------------------------
# PNG and manifest IO


def save_png(path, pixels):
    px = np.asarray(pixels, dtype=np.float64)
    q = np.round(np.clip(px, 0.0, 1.0) * PNG_SCALE).astype(np.uint16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(q).save(path, format="PNG")


def load_png(path):
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise InvalidArgument(f"{path}: expected a single-channel image")
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64) / PNG_SCALE


@dataclass(frozen=True)
class ManifestEntry:
    file: str
    class_id: int
    azimuth_deg: float
    source: Source
    split: str
    id: str

    def to_json(self):
        return {
            "file": self.file,
            "class_id": self.class_id,
            "azimuth_deg": self.azimuth_deg,
            "source": Source(self.source).value,
            "split": self.split,
            "id": self.id,
        }


@dataclass(frozen=True, eq=False)
class DatasetManifest:
    root: Path
    class_names: tuple
    image_size: int
    entries: tuple

    @property
    def n_classes(self):
        return len(self.class_names)

    def split(self, name):
        return tuple(e for e in self.entries if e.split == name)

    def by_id(self, id_):
        for e in self.entries:
            if e.id == id_:
                return e
        raise KeyError(id_)

    def load_image(self, entry):
        px = load_png(Path(self.root) / entry.file)
        if px.shape != (self.image_size, self.image_size):
            raise MalformedRecord(
                f"{entry.file}: image is {px.shape}, manifest declares {self.image_size}", entry=entry.id
            )
        return TargetImage(px, entry.class_id, entry.azimuth_deg, entry.source, entry.id)

    def to_json(self):
        return {
            "class_names": list(self.class_names),
            "image_size": self.image_size,
            "entries": [e.to_json() for e in self.entries],
        }


def save_manifest(manifest, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_json(), indent=1) + "\n")


def _parse_entry(i, rec, n_classes):
    label = rec.get("id", f"#{i}") if isinstance(rec, dict) else f"#{i}"
    if not isinstance(rec, dict):
        raise MalformedRecord(f"entry {label} is not an object", entry=label)
    missing = {"file", "class_id", "azimuth_deg", "source", "split", "id"} - rec.keys()
    if missing:
        raise MalformedRecord(f"entry {label} lacks {sorted(missing)}", entry=label)
    try:
        class_id = rec["class_id"]
        if isinstance(class_id, bool) or not isinstance(class_id, int):
            raise TypeError("class_id")
        az = float(rec["azimuth_deg"])
        source = Source(rec["source"])
        if not isinstance(rec["file"], str) or not isinstance(rec["id"], str):
            raise TypeError("file/id")
    except (TypeError, ValueError) as exc:
        raise MalformedRecord(f"entry {label}: bad field ({exc})", entry=label) from None
    if not 0 <= class_id < n_classes:
        raise MalformedRecord(f"entry {label}: class_id {class_id} outside [0, {n_classes})", entry=label)
    if not 0.0 <= az < 360.0:
        raise MalformedRecord(f"entry {label}: azimuth {az} outside [0, 360)", entry=label)
    if rec["split"] not in SPLITS:
        raise MalformedRecord(f"entry {label}: unknown split {rec['split']!r}", entry=label)
    return ManifestEntry(rec["file"], class_id, az, source, rec["split"], rec["id"])


def load_manifest(path):
    path = Path(path)
    if not path.is_file():
        raise ManifestNotFound(f"manifest not found: {path}", entry=str(path))
    try:
        doc = json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedRecord(f"{path}: not valid JSON ({exc})", entry=str(path)) from None
    if not isinstance(doc, dict) or not {"class_names", "image_size", "entries"} <= doc.keys():
        raise MalformedRecord(f"{path}: needs class_names, image_size and entries", entry=str(path))
    class_names = doc["class_names"]
    if not isinstance(class_names, list) or not all(isinstance(c, str) for c in class_names):
        raise MalformedRecord(f"{path}: class_names must be a list of strings", entry="class_names")
    size = doc["image_size"]
    if isinstance(size, bool) or not isinstance(size, int) or size < 1:
        raise MalformedRecord(f"{path}: image_size must be a positive integer", entry="image_size")
    if not isinstance(doc["entries"], list):
        raise MalformedRecord(f"{path}: entries must be a list", entry="entries")
    entries, seen = [], set()
    root = path.parent
    for i, rec in enumerate(doc["entries"]):
        e = _parse_entry(i, rec, len(class_names))
        if e.id in seen:
            raise DuplicateId(f"duplicate entry id {e.id!r}", entry=e.id)
        seen.add(e.id)
        if not (root / e.file).is_file():
            raise DanglingReference(f"entry {e.id}: image file {e.file} does not exist", entry=e.file)
        entries.append(e)
    return DatasetManifest(root, tuple(class_names), size, tuple(entries))
