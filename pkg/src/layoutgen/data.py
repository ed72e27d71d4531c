"""Synthetic data generation, dataset I/O, and the per-batch task sampler.

Synthetic canvases are smooth color gradients with a few rendered ellipses;
the saliency map is a normalized sum of Gaussian bumps centered on the
ellipses, quantized to the 8-bit grid so the PNG round trip is exact.
Layouts are placed greedily in low-saliency regions and always receive an
underlay that strictly contains one text element, which pins the generator's
occlusion and underlay guarantees by construction.

Disk format, one directory per split::

    {split}/meta.jsonl          {"id", "canvas", "saliency", "elements"}
    {split}/images/{id}.png     8-bit RGB canvas
    {split}/saliency/{id}.png   8-bit grayscale, value/255 -> [0, 1]
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image
from scipy import ndimage

from .core import (Canvas, ConditionBundle, Layout, LayoutElement, MIXTURE_TASKS,
                   TaskKind, build_task_mask, encode_layout)
from .errors import ConfigError, DegenerateInputError, LayoutError
from .geometry import pixel_mean_in_box

FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])

LOGO, TEXT, UNDERLAY, EMBELLISHMENT = 0, 1, 2, 3


@dataclass(frozen=True)
class DatasetSpec:
    source: str = "synthetic"  # "synthetic" or a dataset directory path
    train_size: int = 512
    val_size: int = 64
    test_size: int = 64
    n_categories: int = 3
    n_max: int = 8
    canvas_h: int = 96
    canvas_w: int = 64
    seed: int = 1
    saliency_threshold: float = 0.5
    text_category: int = TEXT
    underlay_category: int = UNDERLAY

    def split_sizes(self) -> dict[str, int]:
        return {"train": self.train_size, "val": self.val_size, "test": self.test_size}


@dataclass(frozen=True)
class TaskMixture:
    """Sampling proportions over the five trainable tasks."""

    uncond: float
    c_to_sp: float
    cs_to_p: float
    completion: float
    relationship: float

    def __post_init__(self):
        probs = self.probs()
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise ConfigError(f"mixture proportions must be nonnegative and sum to 1, got {probs}")

    def probs(self) -> np.ndarray:
        return np.array([self.uncond, self.c_to_sp, self.cs_to_p,
                         self.completion, self.relationship], dtype=np.float64)


PRETRAIN_MIXTURE = TaskMixture(2 / 5, 1 / 5, 1 / 5, 1 / 5, 0.0)
FINETUNE_MIXTURE = TaskMixture(1 / 3, 1 / 6, 1 / 6, 1 / 6, 1 / 6)


@dataclass(frozen=True)
class Sample:
    id: str
    canvas: Canvas
    layout: Layout


@dataclass(frozen=True)
class TrainSample:
    """One collated training example: encoded state, validity, conditioning."""

    x0: np.ndarray
    valid: np.ndarray
    cond: ConditionBundle


def _quantize(values: np.ndarray) -> np.ndarray:
    """Snap floats in [0, 1] onto the 8-bit grid used by the PNG files."""
    return np.round(np.clip(values, 0.0, 1.0) * 255.0) / 255.0


def synth_canvas(rng: np.random.Generator, h: int, w: int, n_blobs: int = 2,
                 saliency_threshold: float = 0.5) -> Canvas:
    """Random gradient background with ellipse blobs and a matching saliency map."""
    if n_blobs < 1:
        raise ConfigError("n_blobs must be >= 1")
    ys, xs = np.mgrid[0:h, 0:w]
    ys = (ys + 0.5) / h
    xs = (xs + 0.5) / w
    angle = rng.uniform(0, 2 * np.pi)
    ramp = xs * np.cos(angle) + ys * np.sin(angle)
    ramp = (ramp - ramp.min()) / (ramp.max() - ramp.min())
    c0, c1 = rng.uniform(0.1, 0.9, size=3), rng.uniform(0.1, 0.9, size=3)
    image = ramp[..., None] * c1 + (1.0 - ramp[..., None]) * c0

    centers: list[tuple[float, float]] = []
    min_dist = 0.4
    tries = 0
    while len(centers) < n_blobs:
        cx, cy = rng.uniform(0.18, 0.82), rng.uniform(0.18, 0.82)
        tries += 1
        if all(np.hypot(cx - ox, cy - oy) >= min_dist for ox, oy in centers):
            centers.append((cx, cy))
        elif tries % 200 == 0:
            min_dist *= 0.95  # relax gradually so generation always terminates
    saliency = np.zeros((h, w))
    for cx, cy in centers:
        rx, ry = rng.uniform(0.06, 0.14, size=2)
        color = rng.uniform(0.0, 1.0, size=3)
        inside = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
        image[inside] = color
        sigma = 0.6 * (rx + ry) / 2
        saliency += np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma ** 2))
    saliency /= saliency.max()
    image = _quantize(image)
    saliency = _quantize(saliency)
    boxes = extract_saliency_boxes(saliency, saliency_threshold)
    return Canvas(image=image, saliency=saliency, saliency_boxes=tuple(boxes))


def _box_mean_saliency(saliency: np.ndarray, box: tuple[float, float, float, float]) -> float:
    return pixel_mean_in_box(saliency, box)


def synth_layout(canvas: Canvas, rng: np.random.Generator, n_elements: int,
                 n_max: int = 8, n_categories: int = 3, max_tries: int = 500,
                 saliency_cap: float = 0.2) -> Layout:
    """Place ``n_elements`` text/logo boxes plus one underlay behind a text.

    Every element (including the underlay) is rejection-sampled until its
    hard-box mean saliency is below ``saliency_cap``, and the underlay is the
    chosen text box inflated by 10% per side, so the layout satisfies
    occlusion < saliency_cap and strict underlay containment by construction.
    """
    if not (1 <= n_elements <= n_max - 1):
        raise ConfigError(f"n_elements must be in [1, {n_max - 1}] to leave room for the underlay")
    for _ in range(20):
        elements = _try_place_elements(canvas, rng, n_elements, n_categories, max_tries, saliency_cap)
        if elements is not None:
            return Layout.from_elements(elements, n_max)
    raise DegenerateInputError(f"could not place {n_elements} elements plus an underlay "
                               f"under saliency {saliency_cap}")


def _try_place_elements(canvas, rng, n_elements, n_categories, max_tries, saliency_cap):
    elements: list[LayoutElement] = []
    placed: list[tuple[float, float, float, float]] = []
    for i in range(n_elements):
        if i == 0:
            category = TEXT
        elif n_categories >= 4 and rng.random() < 0.15:
            category = EMBELLISHMENT
        else:
            category = TEXT if rng.random() < 0.6 else LOGO
        for attempt in range(max_tries):
            if category == TEXT:
                bw, bh = rng.uniform(0.18, 0.45), rng.uniform(0.05, 0.12)
            elif category == LOGO:
                bw, bh = rng.uniform(0.10, 0.22), rng.uniform(0.06, 0.14)
            else:
                bw, bh = rng.uniform(0.04, 0.10), rng.uniform(0.03, 0.08)
            cx = rng.uniform(bw / 2 + 0.06, 1.0 - bw / 2 - 0.06)
            cy = rng.uniform(bh / 2 + 0.06, 1.0 - bh / 2 - 0.06)
            box = (cx, cy, bw, bh)
            if _box_mean_saliency(canvas.saliency, box) >= saliency_cap:
                continue
            # Prefer clean, non-overlapping layouts; give up on that after a while.
            overlaps = any(_boxes_overlap(box, other, pad=0.02) for other in placed)
            if overlaps and attempt < max_tries - 50:
                continue
            elements.append(LayoutElement(category, box))
            placed.append(box)
            break
        else:
            return None
    texts = [i for i, el in enumerate(elements) if el.category == TEXT]
    for ti in rng.permutation(texts):
        cx, cy, bw, bh = elements[int(ti)].box
        uw, uh = bw * 1.2, bh * 1.2
        x1, x2 = max(cx - uw / 2, 0.0), min(cx + uw / 2, 1.0)
        y1, y2 = max(cy - uh / 2, 0.0), min(cy + uh / 2, 1.0)
        under = ((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)
        if _box_mean_saliency(canvas.saliency, under) < saliency_cap:
            elements.append(LayoutElement(UNDERLAY, under))
            return elements
    return None


def _boxes_overlap(a, b, pad: float = 0.0) -> bool:
    ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    return not (ax2 + pad <= bx1 or bx2 + pad <= ax1 or ay2 + pad <= by1 or by2 + pad <= ay1)


def extract_saliency_boxes(saliency: np.ndarray, threshold: float = 0.5) -> list[tuple[float, float, float, float]]:
    """Tight boxes of 4-connected components of {S >= threshold}, largest first."""
    if not (0.0 < threshold < 1.0):
        raise ConfigError(f"threshold must be in (0, 1), got {threshold}")
    h, w = saliency.shape
    labels, count = ndimage.label(saliency >= threshold, structure=FOUR_CONNECTED)
    boxes = []
    for sl_y, sl_x in ndimage.find_objects(labels):
        x1, x2 = sl_x.start / w, sl_x.stop / w
        y1, y2 = sl_y.start / h, sl_y.stop / h
        boxes.append(((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1))
    boxes.sort(key=lambda b: b[2] * b[3], reverse=True)
    return boxes


def task_sampler(mixture: TaskMixture, rng: np.random.Generator) -> Iterator[TaskKind]:
    """Endless i.i.d. task stream following the mixture proportions."""
    probs = mixture.probs()
    while True:
        yield MIXTURE_TASKS[int(rng.choice(len(probs), p=probs))]


def make_dataset(spec: DatasetSpec) -> dict[str, list[Sample]]:
    """Generate all splits deterministically from the dataset seed."""
    if spec.source != "synthetic":
        raise ConfigError("make_dataset only generates synthetic specs; use load_dataset for directories")
    out: dict[str, list[Sample]] = {}
    root = np.random.SeedSequence(spec.seed)
    for split_idx, (split, size) in enumerate(spec.split_sizes().items()):
        samples = []
        for i in range(size):
            rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(split_idx, i)))
            canvas = synth_canvas(rng, spec.canvas_h, spec.canvas_w,
                                  n_blobs=int(rng.integers(1, 4)),
                                  saliency_threshold=spec.saliency_threshold)
            n_elements = int(rng.integers(2, min(spec.n_max - 1, 5) + 1))
            layout = synth_layout(canvas, rng, n_elements, spec.n_max, spec.n_categories)
            samples.append(Sample(id=f"{split}-{i:05d}", canvas=canvas, layout=layout))
        out[split] = samples
    return out


def write_dataset(splits: dict[str, list[Sample]], out_dir: Path) -> None:
    out_dir = Path(out_dir)
    for split, samples in splits.items():
        split_dir = out_dir / split
        (split_dir / "images").mkdir(parents=True, exist_ok=True)
        (split_dir / "saliency").mkdir(parents=True, exist_ok=True)
        records = []
        for s in samples:
            img = Image.fromarray((s.canvas.image * 255.0).round().astype(np.uint8), mode="RGB")
            img.save(split_dir / "images" / f"{s.id}.png")
            sal = Image.fromarray((s.canvas.saliency * 255.0).round().astype(np.uint8), mode="L")
            sal.save(split_dir / "saliency" / f"{s.id}.png")
            records.append({
                "id": s.id,
                "canvas": f"images/{s.id}.png",
                "saliency": f"saliency/{s.id}.png",
                "elements": [{"category": el.category, "box": list(el.box)} for el in s.layout.elements()],
            })
        with open(split_dir / "meta.jsonl", "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_dataset(root: Path, split: str, n_max: int,
                 saliency_threshold: float = 0.5) -> list[Sample]:
    split_dir = Path(root) / split
    meta = split_dir / "meta.jsonl"
    if not meta.exists():
        raise FileNotFoundError(f"no meta.jsonl under {split_dir}")
    samples = []
    with open(meta) as fh:
        for line in fh:
            rec = json.loads(line)
            image = np.asarray(Image.open(split_dir / rec["canvas"]).convert("RGB"), dtype=np.float64) / 255.0
            saliency = np.asarray(Image.open(split_dir / rec["saliency"]).convert("L"), dtype=np.float64) / 255.0
            boxes = extract_saliency_boxes(saliency, saliency_threshold)
            canvas = Canvas(image=image, saliency=saliency, saliency_boxes=tuple(boxes))
            elements = [LayoutElement(int(e["category"]), tuple(e["box"])) for e in rec["elements"]]
            samples.append(Sample(id=rec["id"], canvas=canvas,
                                  layout=Layout.from_elements(elements, n_max)))
    return samples


def validate_sample(sample: Sample, n_categories: int) -> None:
    """Strict invariant check used after generation and loading."""
    layout = sample.layout
    for el in layout.elements():
        if not (0 <= el.category < n_categories):
            raise LayoutError(f"{sample.id}: category {el.category} out of range")
        cx, cy, w, h = el.box
        if not (0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0 and 0.0 < w <= 1.0 and 0.0 < h <= 1.0):
            raise LayoutError(f"{sample.id}: geometry violates layout invariants: {el.box}")
    rng = np.random.default_rng(0)
    for task in MIXTURE_TASKS:
        mask = build_task_mask(task, layout, n_categories, rng)
        if mask.mask.shape != (layout.capacity, n_categories + 4):
            raise LayoutError(f"{sample.id}: bad mask shape for {task}")
    encode_layout(layout, n_categories, layout.capacity)
