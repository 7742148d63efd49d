"""Synthetic two-domain cardiac-like slices, preprocessing and augmentation.

Both domains draw from one family of nested elliptical structures
(class ids 1..4 named AA, LAC, LVC, MYO, background 0). The source renders
class intensities from one profile with white noise; the target uses its own
profile (an order-preserving but compressed remap by default), stronger noise and a
smooth bias field, giving a controlled appearance gap over shared anatomy.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .io import read_tensor, write_tensor

CLASS_NAMES = ("background", "AA", "LAC", "LVC", "MYO")
DOMAIN_CODES = {"source": 0, "target": 1, "target_test": 2}


@dataclass
class SynthConfig:
    image_size: int = 32
    num_foreground_classes: int = 4
    n_source: int = 200
    n_target: int = 200
    n_test: int = 50
    seed: int = 0
    # structure sizes as fractions of the image side
    lv_radius: tuple[float, float] = (0.10, 0.15)
    myo_thickness: tuple[float, float] = (0.04, 0.07)
    la_radius: tuple[float, float] = (0.08, 0.12)
    aa_radius: tuple[float, float] = (0.05, 0.08)
    center_jitter: float = 0.06
    presence_prob: float = 0.85
    # intensities for (background, AA, LAC, LVC, MYO)
    source_intensities: tuple[float, ...] = (0.1, 0.75, 0.6, 0.9, 0.4)
    target_intensities: tuple[float, ...] = (0.15, 0.82, 0.76, 0.9, 0.66)
    source_noise: float = 0.05
    target_noise: float = 0.08
    target_bias_field: float = 0.15

    def __post_init__(self):
        if self.image_size % 4:
            raise ValueError(f"image_size must be a multiple of 4, got {self.image_size}")
        if min(self.n_source, self.n_target, self.n_test) < 1:
            raise ValueError("sample counts must be >= 1")
        if not 1 <= self.num_foreground_classes <= 4:
            raise ValueError("num_foreground_classes must lie in [1, 4]")
        for name in ("source_intensities", "target_intensities"):
            if len(getattr(self, name)) != 5:
                raise ValueError(f"{name} needs 5 entries (background + 4 classes)")
        radii = (*self.lv_radius, *self.myo_thickness, *self.la_radius, *self.aa_radius)
        if min(radii) <= 0 or max(radii) >= 0.5:
            raise ValueError("structure radii must lie in (0, 0.5) of the image side")
        # the ventricle and its wall must fit; satellite structures may clip at the border
        reach = self.lv_radius[1] + self.myo_thickness[1] + self.center_jitter
        if reach >= 0.5:
            raise ValueError(f"ventricle reaches {reach:.3f} of the frame from its centre; must stay < 0.5")

    @property
    def num_classes(self) -> int:
        return self.num_foreground_classes + 1

    def profile(self, domain: str) -> np.ndarray:
        return np.asarray(self.source_intensities if domain == "source" else self.target_intensities)

    def shift(self) -> np.ndarray:
        """Per-class raw intensity offset of the target relative to the source."""
        return self.profile("target") - self.profile("source")


@dataclass
class DomainSample:
    image: np.ndarray  # (1, H, W) float32 in [-1, 1]
    label: np.ndarray | None  # (H, W) uint8
    domain: str
    id: str


class SynthDataset(NamedTuple):
    source: list[DomainSample]
    target: list[DomainSample]
    target_test: list[DomainSample]
    target_labels: dict[str, np.ndarray]


def _ellipse(yy, xx, cy, cx, ry, rx, theta):
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def render_label(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    n = cfg.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5
    theta = rng.uniform(0, 2 * np.pi)
    cy, cx = n * (0.5 + rng.uniform(-cfg.center_jitter, cfg.center_jitter, size=2))
    lv_a, lv_b = n * rng.uniform(*cfg.lv_radius, size=2)
    thick = n * rng.uniform(*cfg.myo_thickness)
    la_r = n * rng.uniform(*cfg.la_radius)
    aa_r = n * rng.uniform(*cfg.aa_radius)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])

    present = rng.random(4) < cfg.presence_prob
    present[cfg.num_foreground_classes :] = False
    if not present.any():
        present[cfg.num_foreground_classes - 1] = True

    label = np.zeros((n, n), dtype=np.uint8)
    outer_a, outer_b = lv_a + thick, lv_b + thick
    # left atrium sits beside the ventricle, aorta above it
    la_off = rot @ np.array([-(outer_a + 0.7 * la_r), -0.5 * outer_b])
    aa_off = rot @ np.array([0.4 * outer_a, -(outer_b + 0.9 * aa_r)])
    if present[1]:
        label[_ellipse(yy, xx, cy + la_off[1], cx + la_off[0], la_r, 1.2 * la_r, theta)] = 2
    if present[0]:
        label[_ellipse(yy, xx, cy + aa_off[1], cx + aa_off[0], aa_r, aa_r, 0.0)] = 1
    if present[3]:
        label[_ellipse(yy, xx, cy, cx, outer_b, outer_a, theta)] = 4
    if present[2]:
        label[_ellipse(yy, xx, cy, cx, lv_b, lv_a, theta)] = 3
    if not (label > 0).any():
        label[_ellipse(yy, xx, cy, cx, outer_b, outer_a, theta)] = 4
    return label


def render_image(cfg: SynthConfig, label: np.ndarray, domain: str, rng: np.random.Generator) -> np.ndarray:
    """Raw (unnormalized) intensities for a label map."""
    if domain == "source":
        img = cfg.profile("source")[label] + rng.normal(0, cfg.source_noise, label.shape)
    else:
        img = cfg.profile("target")[label] + rng.normal(0, cfg.target_noise, label.shape)
        if cfg.target_bias_field:
            n = label.shape[0]
            yy, xx = np.mgrid[0:n, 0:n] / n
            gy, gx = rng.uniform(-1, 1, size=2)
            img = img + cfg.target_bias_field * (gy * (yy - 0.5) + gx * (xx - 0.5))
    return img


def preprocess(image: np.ndarray) -> np.ndarray:
    """Per-image z-score, then min-max rescale to [-1, 1]; constant images map to 0."""
    x = np.asarray(image, dtype=np.float64)
    std = x.std()
    if std == 0:
        return np.zeros_like(x)
    z = (x - x.mean()) / std
    lo, hi = z.min(), z.max()
    return 2.0 * (z - lo) / (hi - lo) - 1.0


def _sample(cfg: SynthConfig, domain: str, index: int) -> tuple[np.ndarray, np.ndarray, str]:
    rng = np.random.default_rng([cfg.seed, DOMAIN_CODES[domain], index])
    label = render_label(cfg, rng)
    render_domain = "source" if domain == "source" else "target"
    image = preprocess(render_image(cfg, label, render_domain, rng)).astype(np.float32)
    return image[None], label, f"{domain}_{index:04d}"


def generate_dataset(cfg: SynthConfig) -> SynthDataset:
    source = []
    for i in range(cfg.n_source):
        img, lbl, sid = _sample(cfg, "source", i)
        source.append(DomainSample(img, lbl, "source", sid))
    target, test, labels = [], [], {}
    for domain, count, bucket in (("target", cfg.n_target, target), ("target_test", cfg.n_test, test)):
        for i in range(count):
            img, lbl, sid = _sample(cfg, domain, i)
            bucket.append(DomainSample(img, None, "target", sid))
            labels[sid] = lbl
    return SynthDataset(source, target, test, labels)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def random_affine(rng: np.random.Generator, max_angle: float = 15.0, scale=(0.9, 1.1), max_shear: float = 0.1):
    return (
        float(rng.uniform(-max_angle, max_angle)),
        float(rng.uniform(*scale)),
        float(rng.uniform(-max_shear, max_shear)),
    )


def apply_affine(sample: DomainSample, angle: float, scale: float, shear: float) -> DomainSample:
    """Rotate/scale/shear about the image centre; bilinear image, nearest label."""
    img = sample.image[0]
    n_h, n_w = img.shape
    a = np.deg2rad(angle)
    rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    forward = rot @ np.array([[1.0, shear], [0.0, 1.0]]) * scale
    inverse = np.linalg.inv(forward)
    center = np.array([(n_h - 1) / 2, (n_w - 1) / 2])
    offset = center - inverse @ center
    image = ndimage.affine_transform(img, inverse, offset=offset, order=1, mode="constant", cval=-1.0)
    label = None
    if sample.label is not None:
        label = ndimage.affine_transform(sample.label, inverse, offset=offset, order=0, mode="constant", cval=0)
    return DomainSample(image[None].astype(sample.image.dtype), label, sample.domain, sample.id)


def augment(sample: DomainSample, rng: np.random.Generator) -> DomainSample:
    return apply_affine(sample, *random_affine(rng))


# ---------------------------------------------------------------------------
# on-disk layout
# ---------------------------------------------------------------------------


def write_dataset(data: SynthDataset, cfg: SynthConfig, out_dir: str | os.PathLike) -> Path:
    out = Path(out_dir)
    (out / "source").mkdir(parents=True, exist_ok=True)
    (out / "target").mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(data.source):
        write_tensor(out / "source" / f"img_{i:04d}.pseg", s.image.astype(np.float32))
        write_tensor(out / "source" / f"lbl_{i:04d}.pseg", s.label.astype(np.uint8))
    for i, s in enumerate(data.target + data.target_test):
        write_tensor(out / "target" / f"img_{i:04d}.pseg", s.image.astype(np.float32))
        write_tensor(out / "target" / f"lbl_{i:04d}.pseg", data.target_labels[s.id].astype(np.uint8))
    manifest = {
        "source": len(data.source),
        "target_train": len(data.target),
        "target_test": len(data.target_test),
        "seed": cfg.seed,
        "config": asdict(cfg),
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    return out


class DiskDataset(NamedTuple):
    source_images: np.ndarray  # (N, 1, H, W)
    source_labels: np.ndarray  # (N, H, W)
    target_images: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    manifest: dict


def load_dataset(data_dir: str | os.PathLike) -> DiskDataset:
    """Read a dataset directory; target labels are read for the test split only."""
    root = Path(data_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {root}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    n_s, n_t, n_test = manifest["source"], manifest["target_train"], manifest["target_test"]

    def stack(pattern, indices, dtype):
        return np.stack([read_tensor(root / pattern.format(i), expect_dtype=dtype) for i in indices])

    return DiskDataset(
        stack("source/img_{:04d}.pseg", range(n_s), np.float32),
        stack("source/lbl_{:04d}.pseg", range(n_s), np.uint8),
        stack("target/img_{:04d}.pseg", range(n_t), np.float32),
        stack("target/img_{:04d}.pseg", range(n_t, n_t + n_test), np.float32),
        stack("target/lbl_{:04d}.pseg", range(n_t, n_t + n_test), np.uint8),
        manifest,
    )
