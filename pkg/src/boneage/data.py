"""Sample manifests, image I/O, training-time augmentation and the synthetic generator."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .graph import N_ROIS, RoiSchema, load_roi_schema

AGE_RANGE = (0.0, 216.0)          # months, 0-18 years
EXTENDED_AGE_RANGE = (0.0, 240.0)  # 0-20 years


class ManifestError(ValueError):
    pass


@dataclass
class Sample:
    id: str
    gender: int
    centers: np.ndarray             # (N, 2) integer (row, col) on the original image
    age_months: float
    image: str | None = None        # path to a grayscale PNG
    feature_map: str | None = None  # path to a single-tensor archive
    scores: np.ndarray | None = None
    pixels: np.ndarray | None = field(default=None, repr=False)
    flags: tuple[str, ...] = ()

    def load_pixels(self) -> np.ndarray:
        if self.pixels is None:
            if self.image is None:
                raise ManifestError(f"sample {self.id!r} has no image")
            self.pixels = read_image(self.image)
        return self.pixels

    def image_size(self) -> tuple[int, int]:
        if self.pixels is not None or self.image is not None:
            return tuple(self.load_pixels().shape)
        raise ManifestError(f"sample {self.id!r} has no image to take a size from")


def read_image(path) -> np.ndarray:
    """Grayscale PNG (8- or 16-bit) as float64 in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim != 2:
        raise ManifestError(f"{path}: expected a single-channel image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if arr.dtype in (np.uint16, np.int32, np.int16):
        return arr.astype(np.float64) / 65535.0
    raise ManifestError(f"{path}: unsupported pixel type {arr.dtype}")


def write_image(path, pixels: np.ndarray) -> None:
    arr = np.round(np.clip(pixels, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(arr).save(path, format="PNG")


def _parse_record(rec: dict, base: Path, n_rois: int, age_range: tuple[float, float]) -> Sample:
    sid = rec.get("id")
    if sid is None:
        raise ManifestError(f"record without 'id': {rec}")

    def fail(msg):
        raise ManifestError(f"record {sid!r}: {msg}")

    for key in ("gender", "age_months", "centers"):
        if key not in rec:
            fail(f"missing field {key!r}")
    if "image" not in rec and "feature_map" not in rec:
        fail("needs 'image' or 'feature_map'")
    if rec["gender"] not in (0, 1):
        fail(f"gender must be 0 or 1, got {rec['gender']!r}")
    centers = np.asarray(rec["centers"])
    if centers.ndim != 2 or centers.shape[1] != 2:
        fail(f"centers must be a list of [I, J] pairs, got shape {centers.shape}")
    if len(centers) != n_rois:
        fail(f"expected {n_rois} ROI centers, got {len(centers)}")
    if np.any(centers < 0) or np.any(centers != np.round(centers)):
        fail("centers must be non-negative integers")
    age = float(rec["age_months"])
    if not age_range[0] <= age <= age_range[1]:
        fail(f"age {age} months outside {age_range}")
    scores = None
    if rec.get("scores") is not None:
        scores = np.asarray(rec["scores"], dtype=np.float64)
        if scores.shape != (n_rois,):
            fail(f"scores must have {n_rois} values, got {scores.shape}")

    def resolve(p):
        return None if p is None else str(base / p)

    return Sample(id=str(sid), gender=int(rec["gender"]), centers=centers.astype(np.int64), age_months=age,
                  image=resolve(rec.get("image")), feature_map=resolve(rec.get("feature_map")), scores=scores)


def load_manifest(path, n_rois: int = N_ROIS, age_range: tuple[float, float] = AGE_RANGE) -> list[Sample]:
    """Parse a JSON-lines manifest; relative paths resolve against the manifest's folder."""
    path = Path(path)
    base = path.parent
    samples, seen = [], set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            sample = _parse_record(rec, base, n_rois, age_range)
            if sample.id in seen:
                raise ManifestError(f"duplicate sample id {sample.id!r}")
            seen.add(sample.id)
            samples.append(sample)
    return samples


def sample_record(sample: Sample, base: Path | None = None, include_scores: bool = True) -> dict:
    def rel(p):
        if p is None:
            return None
        return os.path.relpath(p, base) if base is not None else p

    rec = {"id": sample.id}
    if sample.image is not None:
        rec["image"] = rel(sample.image)
    if sample.feature_map is not None:
        rec["feature_map"] = rel(sample.feature_map)
    rec["gender"] = int(sample.gender)
    rec["age_months"] = float(sample.age_months)
    rec["centers"] = sample.centers.astype(int).tolist()
    if include_scores and sample.scores is not None:
        rec["scores"] = [float(s) for s in sample.scores]
    return rec


def write_manifest(path, samples: Sequence[Sample], include_scores: bool = True) -> None:
    path = Path(path)
    lines = [json.dumps(sample_record(s, path.parent, include_scores)) for s in samples]
    path.write_text("\n".join(lines) + "\n")


def merge_scores(samples: Sequence[Sample], scores_path) -> list[Sample]:
    """Attach ground-truth scores from a JSON-lines table of {"id", "scores"}."""
    table = {}
    with open(scores_path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                table[rec["id"]] = np.asarray(rec["scores"], dtype=np.float64)
    return [replace(s, scores=table.get(s.id, s.scores)) for s in samples]


# -- augmentation ------------------------------------------------------------------

def _rotation(angle_deg: float) -> np.ndarray:
    a = np.deg2rad(angle_deg)
    # (row, col) coordinates; positive angle turns counter-clockwise on screen
    return np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])


def rotate_points(points: np.ndarray, angle_deg: float, image_size: tuple[int, int]) -> np.ndarray:
    c = (np.asarray(image_size, dtype=np.float64) - 1.0) / 2.0
    return (np.asarray(points, dtype=np.float64) - c) @ _rotation(angle_deg).T + c


def rotate_image(pixels: np.ndarray, angle_deg: float) -> np.ndarray:
    R = _rotation(angle_deg)
    c = (np.asarray(pixels.shape, dtype=np.float64) - 1.0) / 2.0
    inv = R.T
    return ndimage.affine_transform(pixels, inv, offset=c - inv @ c, order=1, mode="nearest")


def augment_sample(sample: Sample, seed: int, flip: bool | None = None, angle: float | None = None,
                   blur_sigma: float | None = None) -> Sample:
    """Random horizontal flip, rotation in [-5, 5] degrees, Gaussian blur (sigma in [0.5, 1.5]).

    Unspecified choices are drawn from ``seed``. Centers follow the geometry;
    gender and age never change. ROI labels stay fixed under flipping.
    """
    rng = np.random.default_rng(seed)
    draw_flip, draw_angle = rng.random() < 0.5, rng.uniform(-5.0, 5.0)
    draw_blur = rng.uniform(0.5, 1.5) if rng.random() < 0.5 else 0.0
    flip = draw_flip if flip is None else flip
    angle = draw_angle if angle is None else angle
    blur_sigma = draw_blur if blur_sigma is None else blur_sigma

    pixels = sample.load_pixels()
    H, W = pixels.shape
    centers = sample.centers.astype(np.float64)
    flags = list(sample.flags)
    if flip:
        pixels = pixels[:, ::-1]
        centers = np.stack([centers[:, 0], (W - 1) - centers[:, 1]], axis=1)
    if angle:
        pixels = rotate_image(pixels, angle)
        centers = rotate_points(centers, angle, (H, W))
    if blur_sigma:
        pixels = ndimage.gaussian_filter(pixels, blur_sigma, mode="reflect")
    rounded = np.round(centers)
    clipped = np.clip(rounded, 0, [H - 1, W - 1])
    if np.any(clipped != rounded):
        flags.append("center_clamped")
    return replace(sample, centers=clipped.astype(np.int64), pixels=np.ascontiguousarray(pixels),
                   flags=tuple(flags))


# -- synthetic data ------------------------------------------------------------------

# Nominal ROI sites on an 8x8 grid of 16-pixel cells (128x128 image), schema order
# A1..A5, B1..B5, C1..C5, D1, D2. Fingers 2 and 5 sit one row lower so no two sites
# share a cell edge; sites scale with the image side.
_FINGER_COLS = (1, 2, 3, 5, 6)
_FINGER_STAGGER = (0, 1, 0, 0, 1)
_ROW_OF_GROUP = {"A": 1, "B": 3, "C": 5}
_D_SITES = ((7, 1), (7, 4))
_LAYOUT_GRID = 8


def nominal_layout(image_size: int) -> np.ndarray:
    cells = [(_ROW_OF_GROUP[g] + dz, c) for g in "ABC" for c, dz in zip(_FINGER_COLS, _FINGER_STAGGER)]
    cells += list(_D_SITES)
    return (np.asarray(cells, dtype=np.float64) + 0.5) * image_size / _LAYOUT_GRID


DEFAULT_GROUP_WEIGHTS = {
    # months per unit score; each gender's weights sum to 216 over the 17 ROIs
    0: {"A": 14.0, "B": 12.0, "C": 13.0, "D": 10.5},
    1: {"A": 12.0, "B": 14.0, "C": 14.0, "D": 8.0},
}


@dataclass
class SynthConfig:
    count: int = 64
    seed: int = 0
    image_size: int = 512
    group_weights: dict = field(default_factory=lambda: {g: dict(w) for g, w in DEFAULT_GROUP_WEIGHTS.items()})
    slope_range: tuple[float, float] = (0.6, 1.0)   # per-ROI maturity slope
    score_noise: float = 0.25
    gain_range: tuple[float, float] = (0.6, 1.4)    # per-patient contrast
    radius_range: tuple[float, float] = (2.0, 7.0)  # blob radius at score 0 and 1, per 128 pixels
    jitter: float = 2.0                              # per-ROI center jitter, per 128 pixels
    background: float = 0.1
    pixel_noise: float = 0.02


def blob_radius(score: float, config: SynthConfig) -> float:
    lo, hi = config.radius_range
    return (lo + (hi - lo) * float(score)) * config.image_size / 128.0


def render_blob(canvas: np.ndarray, center, radius: float, group: str, intensity: float) -> None:
    """Draw one ROI in place; the pattern depends on the anatomy group, its extent on ``radius``."""
    H, W = canvas.shape
    reach = int(np.ceil(radius + 2))
    r0, c0 = int(round(center[0])), int(round(center[1]))
    rs, re = max(0, r0 - reach), min(H, r0 + reach + 1)
    cs, ce = max(0, c0 - reach), min(W, c0 + reach + 1)
    rr, cc = np.mgrid[rs:re, cs:ce]
    dr, dc = rr - center[0], cc - center[1]
    d = np.hypot(dr, dc)
    if group == "A":
        patch = np.clip(radius - d + 0.5, 0.0, 1.0)
    elif group == "B":
        patch = np.clip(radius - d + 0.5, 0.0, 1.0) - 0.6 * np.clip(radius * 0.5 - d + 0.5, 0.0, 1.0)
    elif group == "C":
        patch = np.exp(-0.5 * (d / max(radius * 0.6, 1e-6)) ** 2)
    else:
        cheb = np.maximum(np.abs(dr), np.abs(dc))
        patch = np.clip(radius * 0.85 - cheb + 0.5, 0.0, 1.0)
    canvas[rs:re, cs:ce] += intensity * patch


@dataclass
class SynthDataset:
    samples: list[Sample]
    hidden_scores: dict[str, np.ndarray]
    config: SynthConfig


def synth_generate(config: SynthConfig, schema: RoiSchema | None = None, out_dir=None) -> SynthDataset:
    """Render ``config.count`` radiograph-like images with latent per-ROI scores.

    Age is the gender-specific weighted score sum. Returned samples carry no
    scores; the latent table is returned (and written) separately.
    """
    schema = schema or load_roi_schema()
    rng = np.random.default_rng(config.seed)
    S = config.image_size
    if S % 16:
        raise ValueError(f"image size {S} must be divisible by 16")
    scale = S / 128.0
    layout = nominal_layout(S)
    slopes = rng.uniform(*config.slope_range, size=schema.n)
    weights = {g: np.array([config.group_weights[g][grp] for grp in schema.groups]) for g in (0, 1)}

    samples, hidden = [], {}
    width = len(str(max(config.count - 1, 1)))
    for k in range(config.count):
        sid = f"s{k:0{width}d}"
        gender = int(rng.integers(0, 2))
        maturity = rng.uniform()
        scores = np.clip(slopes * maturity + rng.normal(0.0, config.score_noise, schema.n), 0.0, 1.0)
        age = float(np.dot(weights[gender], scores))
        gain = rng.uniform(*config.gain_range)
        jitter = rng.uniform(-config.jitter, config.jitter, size=(schema.n, 2)) * scale
        centers_f = layout + jitter
        canvas = np.full((S, S), config.background) + rng.normal(0.0, config.pixel_noise, (S, S))
        for n in range(schema.n):
            render_blob(canvas, centers_f[n], blob_radius(scores[n], config), schema.groups[n], 0.5 * gain)
        centers = np.clip(np.round(centers_f), 0, S - 1).astype(np.int64)
        samples.append(Sample(id=sid, gender=gender, centers=centers, age_months=age,
                              pixels=np.clip(canvas, 0.0, 1.0)))
        hidden[sid] = scores

    if out_dir is not None:
        out = Path(out_dir)
        (out / "images").mkdir(parents=True, exist_ok=True)
        for s in samples:
            path = out / "images" / f"{s.id}.png"
            write_image(path, s.pixels)
            s.image = str(path)
            # keep the quantized pixels so in-memory and reloaded samples agree
            s.pixels = read_image(path)
        write_manifest(out / "manifest.jsonl", samples, include_scores=False)
        with open(out / "hidden_scores.jsonl", "w") as fh:
            for sid, sc in hidden.items():
                fh.write(json.dumps({"id": sid, "scores": [float(x) for x in sc]}) + "\n")
    return SynthDataset(samples, hidden, config)


def with_scores(samples: Sequence[Sample], table: dict[str, np.ndarray]) -> list[Sample]:
    return [replace(s, scores=table[s.id]) if s.id in table else s for s in samples]


def split(samples: Sequence[Sample], val_fraction: float, seed: int) -> tuple[list[Sample], list[Sample]]:
    """Seeded shuffle then split; returns (train, val)."""
    order = np.random.default_rng(seed).permutation(len(samples))
    n_val = int(round(len(samples) * val_fraction))
    val = [samples[i] for i in sorted(order[:n_val])]
    train = [samples[i] for i in sorted(order[n_val:])]
    return train, val
