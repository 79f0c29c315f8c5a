"""Synthetic stenosis-like ultrasound clips.

Each clip shows a bright vessel wall (annulus) around a dark lumen whose
radius pulses over time, with an echogenic plaque disk seated on the wall and
cutting into the lumen. The remnant ratio of a frame is the open lumen area
divided by the lumen area, measured on the rendered pixel masks; a clip is
severe (1) iff its minimum remnant ratio over frames is below 0.5.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .checkpoint import Checkpoint

MILD, SEVERE = 0, 1
THRESHOLD = 0.5
# remnant-ratio minima are drawn this far from the threshold on either side
MARGIN = 0.1


@dataclass
class ClipSample:
    frames: np.ndarray  # [T, 1, H, W] float32 in [0, 1]
    label: int
    meta: dict = field(default_factory=dict)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def ratio_track(self) -> np.ndarray:
        return np.asarray(self.meta["ratio_track"], dtype=np.float64)


def label_from_ratios(ratios: Sequence[float]) -> int:
    return SEVERE if min(ratios) < THRESHOLD else MILD


def circle_overlap(r1: float, r2: float, d: float) -> float:
    """Area of intersection of two disks with radii r1, r2 and centre distance d."""
    if d >= r1 + r2:
        return 0.0
    if d <= abs(r1 - r2):
        return math.pi * min(r1, r2) ** 2
    a1 = r1 * r1 * math.acos((d * d + r1 * r1 - r2 * r2) / (2 * d * r1))
    a2 = r2 * r2 * math.acos((d * d + r2 * r2 - r1 * r1) / (2 * d * r2))
    a3 = 0.5 * math.sqrt((-d + r1 + r2) * (d + r1 - r2) * (d - r1 + r2) * (d + r1 + r2))
    return a1 + a2 - a3


def plaque_radius_for_ratio(lumen_r: float, ratio: float) -> float:
    """Radius of a plaque disk centred on the lumen boundary leaving ``ratio`` of the lumen open."""
    target = (1.0 - ratio) * math.pi * lumen_r ** 2
    lo, hi = 0.0, 2.0 * lumen_r
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if circle_overlap(lumen_r, mid, lumen_r) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _ratio_track(rng: np.random.Generator, T: int, severe: bool) -> np.ndarray:
    if severe:
        r_min = rng.uniform(0.15, THRESHOLD - MARGIN)
    else:
        r_min = rng.uniform(THRESHOLD + MARGIN, 0.92)
    r_max = min(r_min + rng.uniform(0.1, 0.35), 0.95)
    dip = rng.integers(0, T)
    width = rng.uniform(1.5, 4.0)
    f = np.arange(T)
    shape = 1.0 - np.exp(-((f - dip) / width) ** 2)
    return r_min + (r_max - r_min) * shape


def render_clip(rng: np.random.Generator, T: int, H: int, W: int, severe: bool) -> tuple:
    """Draw geometry for the requested class and render it; returns (frames, pixel ratios, meta)."""
    S = min(H, W)
    cy = H / 2 + rng.uniform(-0.06, 0.06) * S
    cx = W / 2 + rng.uniform(-0.06, 0.06) * S
    r0 = rng.uniform(0.22, 0.30) * S
    wall = rng.uniform(0.06, 0.09) * S
    omega = rng.uniform(0.5, 1.5)
    phase = rng.uniform(0, 2 * math.pi)
    angle = rng.uniform(0, 2 * math.pi)
    target = _ratio_track(rng, T, severe)
    radius = r0 * (1.0 + 0.05 * np.sin(2 * math.pi * omega * np.arange(T) / T + phase))

    wall_level = rng.uniform(0.75, 0.9)
    lumen_level = rng.uniform(0.04, 0.12)
    plaque_level = rng.uniform(0.5, 0.7)
    tissue_level = rng.uniform(0.3, 0.4)
    noise_seed = int(rng.integers(0, 2 ** 31 - 1))
    noise = np.random.default_rng(noise_seed)

    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    dist = np.hypot(yy - cy, xx - cx)
    ky, kx = noise.uniform(0.05, 0.2, size=2)
    texture = 0.05 * np.sin(ky * yy + noise.uniform(0, 6)) * np.sin(kx * xx + noise.uniform(0, 6))

    frames = np.empty((T, 1, H, W), dtype=np.float32)
    ratios = np.empty(T)
    plaque_r = np.empty(T)
    for f in range(T):
        R = radius[f]
        rp = plaque_radius_for_ratio(R, target[f])
        py, px = cy + R * math.sin(angle), cx + R * math.cos(angle)
        lumen = dist < R
        plaque = (np.hypot(yy - py, xx - px) < rp) & (dist < R + wall)
        remnant = lumen & ~plaque
        ratios[f] = remnant.sum() / max(lumen.sum(), 1)
        plaque_r[f] = rp

        img = np.full((H, W), tissue_level) + texture
        img[(dist >= R) & (dist < R + wall)] = wall_level
        img[lumen] = lumen_level
        img[plaque] = plaque_level
        speckle = noise.gamma(4.0, 0.25, size=(H, W))
        img = img * speckle + noise.normal(0.0, 0.02, size=(H, W))
        frames[f, 0] = np.clip(img, 0.0, 1.0)

    meta = OrderedDict(
        radius_track=radius.tolist(), target_ratio_track=target.tolist(), ratio_track=ratios.tolist(),
        plaque_radius_track=plaque_r.tolist(), min_ratio=float(ratios.min()), noise_seed=noise_seed,
        center=[cy, cx], wall=wall, angle=angle,
    )
    return frames, ratios, meta


def generate_clip(seed, T: int, H: int, W: int, severe: bool, max_tries: int = 50) -> ClipSample:
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        frames, ratios, meta = render_clip(rng, T, H, W, severe)
        label = label_from_ratios(ratios)
        # pixelisation can move a borderline minimum across the threshold
        if label == int(severe) and ratios.min() != THRESHOLD:
            return ClipSample(frames, label, meta)
    raise RuntimeError("could not render a clip of the requested class")


def generate_synthetic_dataset(count: int, T: int = 8, H: int = 64, W: int = 64, seed: int = 0) -> list:
    """``count`` clips, half severe (odd counts round the extra clip to severe), deterministic in ``seed``."""
    if count <= 0:
        raise ValueError("count must be positive")
    root = np.random.SeedSequence(seed)
    classes = np.random.default_rng(root.spawn(1)[0]).permutation(
        np.array([MILD] * (count // 2) + [SEVERE] * (count - count // 2)))
    seeds = root.spawn(count)
    return [generate_clip(s, T, H, W, bool(c)) for s, c in zip(seeds, classes)]


def frame_dataset(clips: Sequence[ClipSample], frames_per_clip: int = None, seed: int = 0) -> list:
    """Single-frame samples (T=1) labelled by their own remnant ratio, for 2D pretraining."""
    rng = np.random.default_rng(seed)
    out = []
    for clip in clips:
        idx = np.arange(clip.num_frames)
        if frames_per_clip is not None and frames_per_clip < clip.num_frames:
            idx = np.sort(rng.choice(idx, size=frames_per_clip, replace=False))
        for f in idx:
            r = clip.ratio_track[f]
            out.append(ClipSample(clip.frames[f:f + 1].copy(), int(r < THRESHOLD),
                                  {"ratio_track": [float(r)]}))
    return out


def split_indices(count: int, seed: int = 0, train_fraction: float = 0.7, val_fraction: float = 0.1) -> tuple:
    """Disjoint train/val/test index arrays by clip, stable in ``seed``."""
    perm = np.random.default_rng(seed).permutation(count)
    n_train = int(round(train_fraction * count))
    n_val = int(round(val_fraction * count))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]), np.sort(perm[n_train + n_val:])


def batch_clips(clips: Sequence[ClipSample]) -> tuple:
    """Stack clips into ``[N, 1, T, H, W]`` and a label vector."""
    x = np.stack([c.frames.transpose(1, 0, 2, 3) for c in clips])
    return x, np.array([c.label for c in clips], dtype=np.int64)


# ---------------------------------------------------------------- clip files

def save_clip(sample: ClipSample, path: Union[str, Path]) -> None:
    meta = OrderedDict((k, " ".join(str(x) for x in v) if isinstance(v, list) else str(v))
                       for k, v in sample.meta.items())
    Checkpoint(OrderedDict(frames=sample.frames, label=np.asarray(sample.label, np.float32)), meta).save(path)


def load_clip(path: Union[str, Path]) -> ClipSample:
    ckpt = Checkpoint.load(path)
    if "frames" not in ckpt or "label" not in ckpt:
        raise ValueError(f"{path}: clip files need 'frames' and 'label' tensors")
    frames = ckpt["frames"]
    if frames.ndim != 4 or frames.shape[1] != 1:
        raise ValueError(f"{path}: frames must be [T, 1, H, W], got {frames.shape}")
    meta = OrderedDict()
    for k, v in ckpt.meta.items():
        parts = v.split()
        try:
            nums = [float(p) for p in parts]
            meta[k] = nums if len(nums) != 1 or k.endswith("_track") else nums[0]
        except ValueError:
            meta[k] = v
    return ClipSample(frames, int(ckpt["label"].item()), meta)


def save_dataset(samples: Sequence[ClipSample], directory: Union[str, Path]) -> list:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, s in enumerate(samples):
        p = directory / f"clip_{i:05d}.clip"
        save_clip(s, p)
        paths.append(p)
    return paths


def load_dataset(directory: Union[str, Path]) -> list:
    paths = sorted(Path(directory).glob("clip_*.clip"))
    if not paths:
        raise FileNotFoundError(f"no clip_*.clip files in {directory}")
    return [load_clip(p) for p in paths]
