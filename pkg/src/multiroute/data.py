"""Synthetic detection scenes and the multi-scale patchify stem.

Scenes are rectangles with class-determined color/texture on a noisy
background. All randomness is counter-based: every draw comes from its own
Philox stream keyed by (seed, draw index), so content never depends on
generation order. Images are cheap to regenerate, which is why dataset
manifests store only seeds and ground truths.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import geometry

# base (R, G, B) and texture per class; texture in {solid, stripes, checker}
_CLASS_STYLES = [
    ((0.85, 0.15, 0.15), "solid"),
    ((0.10, 0.75, 0.20), "stripes"),
    ((0.15, 0.25, 0.85), "checker"),
    ((0.85, 0.75, 0.10), "stripes"),
    ((0.70, 0.15, 0.75), "checker"),
    ((0.10, 0.70, 0.70), "solid"),
]


@dataclass
class GenConfig:
    image_size: int = 64
    n_classes: int = 3
    count_range: tuple[int, int] = (2, 6)
    size_range: tuple[float, float] = (0.08, 0.5)
    max_overlap_iou: float = 0.5
    background_noise: float = 0.1

    def validate(self) -> None:
        lo, hi = self.count_range
        if not (1 <= lo <= hi):
            raise ValueError(f"bad count_range {self.count_range}")
        smin, smax = self.size_range
        if not (0 < smin <= smax <= 1.0):
            raise ValueError(f"infeasible size_range {self.size_range}")
        if smin < 0.08:
            raise ValueError("min side must be >= 0.08")
        if not (1 <= self.n_classes <= len(_CLASS_STYLES)):
            raise ValueError(f"n_classes must be in [1, {len(_CLASS_STYLES)}]")
        if self.image_size % 32 != 0:
            raise ValueError("image_size must be divisible by the coarsest stride (32)")


@dataclass
class SceneSample:
    image: np.ndarray          # (H, W, 3) float64 in [0, 1]
    boxes: np.ndarray          # (k, 4) cxcywh, normalized
    labels: np.ndarray         # (k,) int64
    seed: int

    @property
    def n_objects(self) -> int:
        return len(self.labels)


_MASK64 = (1 << 64) - 1


def _stream(seed: int, draw: int) -> np.random.Generator:
    """Independent generator for one draw of one scene."""
    return np.random.Generator(np.random.Philox(key=[seed & _MASK64, draw & _MASK64]))


def derive_scene_seed(dataset_seed: int, index: int) -> int:
    """Stable 64-bit mix of (dataset seed, scene index), SplitMix64-style."""
    z = (dataset_seed * 0x9E3779B97F4A7C15 + index + 1) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def sample_gts(seed: int, config: GenConfig):
    """Ground-truth boxes and labels for one scene (no rendering)."""
    config.validate()
    lo, hi = config.count_range
    count = int(_stream(seed, 0).integers(lo, hi + 1))
    smin, smax = config.size_range
    boxes = []
    labels = []
    for k in range(count):
        rng = _stream(seed, 1 + k)
        labels.append(int(rng.integers(0, config.n_classes)))
        for _ in range(1000):
            w = float(rng.uniform(smin, smax))
            h = float(rng.uniform(smin, smax))
            cx = float(rng.uniform(w / 2, 1 - w / 2))
            cy = float(rng.uniform(h / 2, 1 - h / 2))
            cand = np.array([[cx, cy, w, h]])
            if not boxes:
                break
            ious = geometry.iou_pairwise(geometry.cxcywh_to_xyxy(cand),
                                         geometry.cxcywh_to_xyxy(np.array(boxes)))
            if np.all(ious <= config.max_overlap_iou):
                break
        else:
            raise RuntimeError(f"could not place object {k} of scene {seed}")
        boxes.append([cx, cy, w, h])
    return np.array(boxes), np.array(labels, dtype=np.int64)


def _paint(image: np.ndarray, box, label: int, brightness: float) -> None:
    size = image.shape[0]
    x1 = int(round((box[0] - box[2] / 2) * size))
    x2 = int(round((box[0] + box[2] / 2) * size))
    y1 = int(round((box[1] - box[3] / 2) * size))
    y2 = int(round((box[1] + box[3] / 2) * size))
    x1, y1 = max(x1, 0), max(y1, 0)
    x2, y2 = min(x2, size), min(y2, size)
    color, texture = _CLASS_STYLES[label]
    patch = np.tile(np.asarray(color) * brightness, (y2 - y1, x2 - x1, 1))
    ys = np.arange(y1, y2)[:, None]
    xs = np.arange(x1, x2)[None, :]
    if texture == "stripes":
        dark = (ys // 2) % 2 == 1
        patch[np.broadcast_to(dark, patch.shape[:2])] *= 0.45
    elif texture == "checker":
        dark = ((ys // 2) + (xs // 2)) % 2 == 1
        patch[dark] *= 0.45
    image[y1:y2, x1:x2, :] = patch


def render_scene(seed: int, boxes: np.ndarray, labels: np.ndarray,
                 config: GenConfig) -> np.ndarray:
    size = config.image_size
    bg = _stream(seed, 10_000)
    image = 0.45 + config.background_noise * bg.standard_normal((size, size, 3))
    for k, (box, label) in enumerate(zip(boxes, labels)):
        jitter = float(_stream(seed, 20_000 + k).uniform(0.85, 1.0))
        _paint(image, box, int(label), jitter)
    return np.clip(image, 0.0, 1.0)


def generate_scene(seed: int, config: GenConfig) -> SceneSample:
    """Fully deterministic scene for (seed, config)."""
    boxes, labels = sample_gts(seed, config)
    image = render_scene(seed, boxes, labels, config)
    return SceneSample(image=image, boxes=boxes, labels=labels, seed=int(seed))


def generate_dataset(dataset_seed: int, count: int, config: GenConfig) -> list[SceneSample]:
    return [generate_scene(derive_scene_seed(dataset_seed, i), config) for i in range(count)]


def write_manifest(path, scenes) -> None:
    """One JSONL line per scene: seed plus ground truths (images are re-derived)."""
    with open(path, "w") as fh:
        for s in scenes:
            gts = [{"cx": b[0], "cy": b[1], "w": b[2], "h": b[3], "label": int(l)}
                   for b, l in zip(s.boxes.tolist(), s.labels)]
            fh.write(json.dumps({"seed": int(s.seed), "gts": gts}) + "\n")


def load_manifest(path, config: GenConfig) -> list[SceneSample]:
    scenes = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            entry = json.loads(line)
            scene = generate_scene(int(entry["seed"]), config)
            recorded = np.array([[g["cx"], g["cy"], g["w"], g["h"]] for g in entry["gts"]])
            if recorded.shape != scene.boxes.shape or not np.allclose(recorded, scene.boxes):
                raise ValueError(f"manifest gts for seed {entry['seed']} do not match regeneration")
            scenes.append(scene)
    return scenes


class FeatureStem:
    """Non-overlapping patchify + linear projection at strides 32/16/8.

    Emits one token tensor per scale, coarsest first, shapes
    (B, (H/stride)^2, d_model). Strides are fixed so a 64x64 image yields
    the 4/16/64 token pyramid the scale-aware encoder expects.
    """

    STRIDES = (32, 16, 8)

    def __init__(self, params: ad.ParamSet, d_model: int, rng: np.random.Generator,
                 prefix: str = "stem"):
        self.d_model = d_model
        self.proj = []
        for stride in self.STRIDES:
            fan_in = stride * stride * 3
            bound = np.sqrt(6.0 / (fan_in + d_model))
            w = params.add(f"{prefix}.s{stride}.w", rng.uniform(-bound, bound, (fan_in, d_model)))
            b = params.add(f"{prefix}.s{stride}.b", np.zeros(d_model))
            self.proj.append((stride, w, b))

    def __call__(self, images: np.ndarray):
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        batch, h, w_img, _ = images.shape
        if h % max(self.STRIDES) or w_img % max(self.STRIDES):
            raise ValueError(f"image dims {h}x{w_img} not divisible by stride {max(self.STRIDES)}")
        out = []
        for stride, w, b in self.proj:
            gh, gw = h // stride, w_img // stride
            patches = images.reshape(batch, gh, stride, gw, stride, 3)
            patches = patches.transpose(0, 1, 3, 2, 4, 5).reshape(batch * gh * gw, -1)
            tokens = ad.matmul(ad.Tensor(patches), w.tensor)
            tokens = ad.add(tokens, b.tensor)
            out.append(ad.reshape(tokens, (batch, gh * gw, self.d_model)))
        return out
