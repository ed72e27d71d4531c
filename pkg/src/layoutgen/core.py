"""Domain types for layouts, canvases, tasks, and constraint structures.

A layout is a fixed-capacity list of slots. Each slot holds a category index
and a normalized (cx, cy, w, h) box; padding slots are flagged invalid and
carry a designated zero element. The continuous representation used by the
diffusion process is an N x (C + 4) matrix with one-hot categories mapped to
{-1, +1} and geometry mapped from [0, 1] to [-1, 1].

Relation codes (channel 0 = size, channel 1 = position):

    size:     0 none, 1 smaller, 2 equal, 3 larger
    position: 0 none, 1 above, 2 below, 3 left-of, 4 right-of, 5 overlap

``rel[i, j, 0]`` encodes the size of element j relative to element i
(area ratio A_j / A_i against the tolerance margin). The position channel
uses edge-ordering predicates: ``rel[i, j, 1] = above`` iff the bottom edge
of i lies at or above the top edge of j. Index 0 is the canvas: ``rel[0, j]``
holds element j's size relative to the full canvas and the canvas third
(top/center/bottom -> above/overlap/below) containing its center.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, LayoutError

SIZE_NONE, SIZE_SMALLER, SIZE_EQUAL, SIZE_LARGER = 0, 1, 2, 3
POS_NONE, POS_ABOVE, POS_BELOW, POS_LEFT, POS_RIGHT, POS_OVERLAP = 0, 1, 2, 3, 4, 5

SIZE_CODE_NAMES = {SIZE_SMALLER: "smaller", SIZE_EQUAL: "equal", SIZE_LARGER: "larger"}
POS_CODE_NAMES = {
    POS_ABOVE: "above",
    POS_BELOW: "below",
    POS_LEFT: "left_of",
    POS_RIGHT: "right_of",
    POS_OVERLAP: "overlap",
}

# Antisymmetric counterparts: rel[i, j] = c implies rel[j, i] = conjugate(c).
SIZE_CONJUGATE = {SIZE_NONE: SIZE_NONE, SIZE_SMALLER: SIZE_LARGER,
                  SIZE_EQUAL: SIZE_EQUAL, SIZE_LARGER: SIZE_SMALLER}
POS_CONJUGATE = {POS_NONE: POS_NONE, POS_ABOVE: POS_BELOW, POS_BELOW: POS_ABOVE,
                 POS_LEFT: POS_RIGHT, POS_RIGHT: POS_LEFT, POS_OVERLAP: POS_OVERLAP}


class TaskKind(enum.Enum):
    UNCOND = "uncond"
    C_TO_SP = "c_to_sp"
    CS_TO_P = "cs_to_p"
    COMPLETION = "completion"
    REFINEMENT = "refinement"
    RELATIONSHIP = "relationship"


# Tasks that appear in training mixtures (refinement reuses the
# unconditional path at inference time and is never trained directly).
MIXTURE_TASKS = (TaskKind.UNCOND, TaskKind.C_TO_SP, TaskKind.CS_TO_P,
                 TaskKind.COMPLETION, TaskKind.RELATIONSHIP)


@dataclass(frozen=True)
class LayoutElement:
    """One layout element: a category plus a normalized center-size box."""

    category: int
    box: tuple[float, float, float, float]  # (cx, cy, w, h) in canvas units


ZERO_ELEMENT = LayoutElement(category=0, box=(0.0, 0.0, 0.0, 0.0))


@dataclass(frozen=True)
class Layout:
    """Fixed-capacity element list with per-slot validity flags.

    Invalid slots carry the designated zero element and are excluded from
    every loss and metric.
    """

    categories: np.ndarray  # (N_max,) int
    boxes: np.ndarray       # (N_max, 4) float, (cx, cy, w, h)
    valid: np.ndarray       # (N_max,) bool

    def __post_init__(self):
        cats = np.asarray(self.categories, dtype=np.int64)
        boxes = np.asarray(self.boxes, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if boxes.shape != (cats.shape[0], 4) or valid.shape != cats.shape:
            raise LayoutError(f"inconsistent layout arrays: {cats.shape}, {boxes.shape}, {valid.shape}")
        if valid.any():
            vb = boxes[valid]
            if np.any(vb < 0.0) or np.any(vb > 1.0):
                raise LayoutError("valid element geometry outside [0, 1]")
        for arr in (cats, boxes, valid):
            arr.setflags(write=False)
        object.__setattr__(self, "categories", cats)
        object.__setattr__(self, "boxes", boxes)
        object.__setattr__(self, "valid", valid)

    @property
    def capacity(self) -> int:
        return int(self.categories.shape[0])

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def elements(self) -> list[LayoutElement]:
        """Valid elements in slot order."""
        return [LayoutElement(int(self.categories[i]), tuple(float(v) for v in self.boxes[i]))
                for i in range(self.capacity) if self.valid[i]]

    @staticmethod
    def from_elements(elements: list[LayoutElement], n_max: int) -> "Layout":
        if len(elements) > n_max:
            raise LayoutError(f"{len(elements)} elements exceed capacity {n_max}")
        cats = np.zeros(n_max, dtype=np.int64)
        boxes = np.zeros((n_max, 4), dtype=np.float64)
        valid = np.zeros(n_max, dtype=bool)
        for i, el in enumerate(elements):
            cats[i] = el.category
            boxes[i] = el.box
            valid[i] = True
        return Layout(cats, boxes, valid)

    @staticmethod
    def empty(n_max: int) -> "Layout":
        return Layout.from_elements([], n_max)


@dataclass(frozen=True)
class Canvas:
    """Background image, saliency map, and extracted saliency boxes.

    ``image`` is H x W x 3 in [0, 1], ``saliency`` is H x W in [0, 1];
    saliency boxes use the same normalized (cx, cy, w, h) convention as
    layout elements and lie within the unit square.
    """

    image: np.ndarray
    saliency: np.ndarray
    saliency_boxes: tuple[tuple[float, float, float, float], ...] = ()

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        sal = np.asarray(self.saliency, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise LayoutError(f"canvas image must be HxWx3, got {img.shape}")
        if sal.shape != img.shape[:2]:
            raise LayoutError(f"saliency shape {sal.shape} does not match image {img.shape[:2]}")
        for cx, cy, w, h in self.saliency_boxes:
            if not (0.0 <= cx - w / 2 and cx + w / 2 <= 1.0 and 0.0 <= cy - h / 2 and cy + h / 2 <= 1.0):
                raise LayoutError("saliency box extends outside the unit square")
        img.setflags(write=False)
        sal.setflags(write=False)
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "saliency", sal)
        object.__setattr__(self, "saliency_boxes", tuple(tuple(map(float, b)) for b in self.saliency_boxes))

    @property
    def height(self) -> int:
        return int(self.image.shape[0])

    @property
    def width(self) -> int:
        return int(self.image.shape[1])


@dataclass(frozen=True)
class PartialConstraintMask:
    """Binary field mask plus the clean encoded values of masked fields.

    ``mask`` is N_max x (C + 4) with the C category columns given atomically
    per element; ``known_values`` carries the encoded clean value wherever
    mask is 1 and is zero elsewhere.
    """

    mask: np.ndarray
    known_values: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=np.float64)
        kv = np.asarray(self.known_values, dtype=np.float64)
        if m.shape != kv.shape or m.ndim != 2:
            raise LayoutError(f"mask/known_values shape mismatch: {m.shape} vs {kv.shape}")
        if not np.all((m == 0.0) | (m == 1.0)):
            raise LayoutError("mask entries must be 0 or 1")
        if np.any(kv[m == 0.0] != 0.0):
            raise LayoutError("known_values nonzero where mask is zero")
        n_cat = m.shape[1] - 4
        cat_sums = m[:, :n_cat].sum(axis=1)
        if not np.all((cat_sums == 0) | (cat_sums == n_cat)):
            raise LayoutError("category columns must be masked atomically")
        m.setflags(write=False)
        kv.setflags(write=False)
        object.__setattr__(self, "mask", m)
        object.__setattr__(self, "known_values", kv)

    @staticmethod
    def zeros(n_max: int, n_categories: int) -> "PartialConstraintMask":
        shape = (n_max, n_categories + 4)
        return PartialConstraintMask(np.zeros(shape), np.zeros(shape))


@dataclass(frozen=True)
class RelationMatrix:
    """(N_max+1) x (N_max+1) x 2 coded pairwise relations; index 0 = canvas."""

    rel: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rel, dtype=np.int64)
        if r.ndim != 3 or r.shape[0] != r.shape[1] or r.shape[2] != 2:
            raise LayoutError(f"relation matrix must be (N+1, N+1, 2), got {r.shape}")
        if np.any(r[..., 0] < 0) or np.any(r[..., 0] > 3) or np.any(r[..., 1] < 0) or np.any(r[..., 1] > 5):
            raise LayoutError("relation code out of range")
        if np.any(np.diagonal(r, axis1=0, axis2=1) != 0):
            raise LayoutError("diagonal relation entries must be 0")
        r.setflags(write=False)
        object.__setattr__(self, "rel", r)

    @property
    def n_slots(self) -> int:
        return int(self.rel.shape[0]) - 1

    def is_empty(self) -> bool:
        return not self.rel.any()

    @property
    def canvas_row(self) -> np.ndarray:
        """Relations of each element w.r.t. the canvas: (N_max, 2) codes."""
        return self.rel[0, 1:, :]

    @property
    def intra(self) -> np.ndarray:
        """Intra-layout block: (N_max, N_max, 2) codes."""
        return self.rel[1:, 1:, :]

    @staticmethod
    def zeros(n_max: int) -> "RelationMatrix":
        return RelationMatrix(np.zeros((n_max + 1, n_max + 1, 2), dtype=np.int64))


@dataclass(frozen=True)
class HybridTask:
    """Arbitrary combination of a partial constraint mask and relations."""

    mask: PartialConstraintMask
    relations: RelationMatrix | None = None


@dataclass(frozen=True)
class ConditionBundle:
    """Everything the denoiser is conditioned on for one sample."""

    canvas: Canvas
    mask: PartialConstraintMask
    relations: RelationMatrix
    task: TaskKind | HybridTask


def encode_layout(layout: Layout, n_categories: int, n_max: int) -> np.ndarray:
    """Map a layout into the continuous N_max x (C + 4) diffusion state.

    Categories become one-hot rows affinely mapped to {-1, +1}; geometry maps
    v -> 2v - 1. Invalid slots become the padding row: all -1 categories with
    zero geometry.
    """
    if layout.capacity != n_max:
        raise LayoutError(f"layout capacity {layout.capacity} != n_max {n_max}")
    if layout.valid.any() and int(layout.categories[layout.valid].max()) >= n_categories:
        raise LayoutError(f"category >= {n_categories}")
    x = np.zeros((n_max, n_categories + 4), dtype=np.float64)
    x[:, :n_categories] = -1.0
    for i in range(n_max):
        if layout.valid[i]:
            x[i, layout.categories[i]] = 1.0
            x[i, n_categories:] = 2.0 * layout.boxes[i] - 1.0
    return x


def decode_layout(x0: np.ndarray, n_categories: int, validity_threshold: float = 0.0) -> Layout:
    """Inverse of :func:`encode_layout`, total on arbitrary real input.

    Category is the argmax over category columns (ties break toward the lower
    index); geometry is clamped back into [0, 1]. A slot is invalid when its
    largest category value falls below ``validity_threshold``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    n_max = x0.shape[0]
    cats = np.zeros(n_max, dtype=np.int64)
    boxes = np.zeros((n_max, 4), dtype=np.float64)
    valid = np.zeros(n_max, dtype=bool)
    for i in range(n_max):
        cat_row = x0[i, :n_categories]
        if cat_row.max() < validity_threshold:
            continue
        valid[i] = True
        cats[i] = int(np.argmax(cat_row))
        boxes[i] = np.clip((x0[i, n_categories:] + 1.0) / 2.0, 0.0, 1.0)
    return Layout(cats, boxes, valid)


def build_task_mask(task: TaskKind, layout: Layout, n_categories: int,
                    rng: np.random.Generator, completion_keep_prob: float = 0.2) -> PartialConstraintMask:
    """Derive the partial constraint mask a task exposes over a ground truth layout.

    Unconditional and refinement tasks expose nothing. Category-conditioned
    tasks expose the category columns (plus width/height for the
    category+size task); the relationship task also conditions on categories.
    Completion exposes all columns of a random nonempty strict subset of the
    valid elements.
    """
    n_max = layout.capacity
    shape = (n_max, n_categories + 4)
    mask = np.zeros(shape)
    if task in (TaskKind.UNCOND, TaskKind.REFINEMENT):
        pass
    elif task in (TaskKind.C_TO_SP, TaskKind.RELATIONSHIP):
        mask[layout.valid, :n_categories] = 1.0
    elif task is TaskKind.CS_TO_P:
        mask[layout.valid, :n_categories] = 1.0
        mask[layout.valid, n_categories + 2:n_categories + 4] = 1.0
    elif task is TaskKind.COMPLETION:
        idx = np.flatnonzero(layout.valid)
        if idx.size == 0:
            raise DegenerateInputError("completion requires at least one valid element")
        keep = rng.random(idx.size) < completion_keep_prob
        if not keep.any():
            keep[rng.integers(idx.size)] = True
        if keep.all() and idx.size > 1:
            keep[rng.integers(idx.size)] = False
        mask[idx[keep], :] = 1.0
    else:
        raise LayoutError(f"no mask rule for task {task}")
    encoded = encode_layout(layout, n_categories, n_max)
    return PartialConstraintMask(mask, encoded * mask)


def build_hybrid_task(parts: list[TaskKind], layout: Layout, n_categories: int,
                      rng: np.random.Generator, completion_keep_prob: float = 0.2,
                      relation_fraction: float = 0.1, margin_alpha: float = 0.1) -> HybridTask:
    """Compose a completion subset with secondary conditioning on the rest.

    ``parts`` lists the combined tasks, e.g. [COMPLETION, C_TO_SP]. The
    completion subset is fully exposed; any category/size conditioning
    applies to the remaining valid elements. A RELATIONSHIP part attaches a
    sampled relation subset.
    """
    parts = list(parts)
    base = build_task_mask(TaskKind.COMPLETION, layout, n_categories, rng, completion_keep_prob) \
        if TaskKind.COMPLETION in parts else PartialConstraintMask.zeros(layout.capacity, n_categories)
    mask = np.array(base.mask)
    completed = mask.all(axis=1)
    rest = layout.valid & ~completed
    secondary = [p for p in parts if p not in (TaskKind.COMPLETION, TaskKind.RELATIONSHIP)]
    for part in secondary:
        if part in (TaskKind.C_TO_SP, TaskKind.RELATIONSHIP):
            mask[rest, :n_categories] = 1.0
        elif part is TaskKind.CS_TO_P:
            mask[rest, :n_categories] = 1.0
            mask[rest, n_categories + 2:n_categories + 4] = 1.0
        else:
            raise LayoutError(f"task {part} cannot join a hybrid mask")
    relations = None
    if TaskKind.RELATIONSHIP in parts:
        mask[layout.valid, :n_categories] = 1.0
        relations = sample_relation_subset(extract_relations(layout, margin_alpha), relation_fraction, rng)
    encoded = encode_layout(layout, n_categories, layout.capacity)
    return HybridTask(PartialConstraintMask(mask, encoded * mask), relations)


def build_input_mask(task: TaskKind, provided: Layout, n_categories: int) -> PartialConstraintMask:
    """Mask for user-supplied conditioning where every provided slot counts.

    Unlike :func:`build_task_mask`, which simulates a task over a ground
    truth layout, this exposes exactly the fields the task consumes for all
    valid slots of the provided partial layout.
    """
    n_max = provided.capacity
    mask = np.zeros((n_max, n_categories + 4))
    if task in (TaskKind.C_TO_SP, TaskKind.RELATIONSHIP):
        mask[provided.valid, :n_categories] = 1.0
    elif task is TaskKind.CS_TO_P:
        mask[provided.valid, :n_categories] = 1.0
        mask[provided.valid, n_categories + 2:n_categories + 4] = 1.0
    elif task is TaskKind.COMPLETION:
        mask[provided.valid, :] = 1.0
    elif task not in (TaskKind.UNCOND, TaskKind.REFINEMENT):
        raise LayoutError(f"no input mask rule for task {task}")
    encoded = encode_layout(provided, n_categories, n_max)
    return PartialConstraintMask(mask, encoded * mask)


_SIZE_BY_NAME = {v: k for k, v in SIZE_CODE_NAMES.items()}
_POS_BY_NAME = {v: k for k, v in POS_CODE_NAMES.items()}


def relations_from_user(entries: list[dict], n_max: int) -> RelationMatrix:
    """Translate a user relation list into the coded matrix.

    Each entry reads as "subject is CODE (than) object":
    ``{"subject_index": 0, "object_index": 1, "channel": "size",
    "code": "smaller"}``. Either index may be the string ``"canvas"``.
    Canvas position statements use the vertical thirds (above = top,
    overlap = center, below = bottom). Both ordered matrix entries are set so
    antisymmetry holds.
    """
    rel = np.zeros((n_max + 1, n_max + 1, 2), dtype=np.int64)

    def slot(value) -> int:
        if value == "canvas":
            return 0
        idx = int(value)
        if not (0 <= idx < n_max):
            raise LayoutError(f"element index {idx} out of range [0, {n_max})")
        return idx + 1

    for entry in entries:
        try:
            s, o = slot(entry["subject_index"]), slot(entry["object_index"])
            channel, code_name = entry["channel"], entry["code"]
        except KeyError as exc:
            raise LayoutError(f"relation entry missing field {exc}") from exc
        if s == o:
            raise LayoutError("relation subject and object must differ")
        if channel == "size":
            code = _SIZE_BY_NAME.get(code_name)
            if code is None:
                raise LayoutError(f"unknown size code {code_name!r}")
            if o == 0:    # subject vs canvas: canvas row holds the subject's code
                rel[0, s, 0], rel[s, 0, 0] = code, SIZE_CONJUGATE[code]
            elif s == 0:  # canvas vs object: flip into canvas-row form
                rel[0, o, 0], rel[o, 0, 0] = SIZE_CONJUGATE[code], code
            else:         # "s smaller than o" lands at rel[o, s] (A_s vs A_o)
                rel[o, s, 0], rel[s, o, 0] = code, SIZE_CONJUGATE[code]
        elif channel == "position":
            code = _POS_BY_NAME.get(code_name)
            if code is None:
                raise LayoutError(f"unknown position code {code_name!r}")
            if 0 in (s, o) and code in (POS_LEFT, POS_RIGHT):
                raise LayoutError("canvas position relations support above/below/overlap only")
            if o == 0:
                rel[0, s, 1], rel[s, 0, 1] = code, POS_CONJUGATE[code]
            elif s == 0:
                rel[0, o, 1], rel[o, 0, 1] = POS_CONJUGATE[code], code
            else:
                rel[s, o, 1], rel[o, s, 1] = code, POS_CONJUGATE[code]
        else:
            raise LayoutError(f"unknown relation channel {channel!r}")
    return RelationMatrix(rel)


def _box_area(box: np.ndarray) -> float:
    return float(box[2] * box[3])


def _size_code(area_ratio: float, margin_alpha: float) -> int:
    # Log-symmetric tolerance band: |log r| <= log(1 + alpha). A one-sided
    # band [1 - alpha, 1 + alpha] would break antisymmetry for ratios between
    # 1 - alpha and 1 / (1 + alpha).
    if area_ratio > 1.0 + margin_alpha:
        return SIZE_LARGER
    if area_ratio < 1.0 / (1.0 + margin_alpha):
        return SIZE_SMALLER
    return SIZE_EQUAL


def _position_code(box_i: np.ndarray, box_j: np.ndarray) -> int:
    cx_i, cy_i, w_i, h_i = box_i
    cx_j, cy_j, w_j, h_j = box_j
    if cy_i + h_i / 2 <= cy_j - h_j / 2:
        return POS_ABOVE
    if cy_j + h_j / 2 <= cy_i - h_i / 2:
        return POS_BELOW
    if cx_i + w_i / 2 <= cx_j - w_j / 2:
        return POS_LEFT
    if cx_j + w_j / 2 <= cx_i - w_i / 2:
        return POS_RIGHT
    # No separating axis ordering: the boxes intersect.
    return POS_OVERLAP


def extract_relations(layout: Layout, margin_alpha: float = 0.1) -> RelationMatrix:
    """Compute the full pairwise relation matrix from a layout.

    Size codes compare area ratios with a multiplicative tolerance margin;
    the canvas (index 0) has unit area. Position codes use edge ordering,
    falling back to overlap when no axis separates the pair; canvas position
    entries encode the vertical third containing each element's center.
    """
    if margin_alpha <= 0:
        raise LayoutError("margin_alpha must be positive")
    n_max = layout.capacity
    rel = np.zeros((n_max + 1, n_max + 1, 2), dtype=np.int64)
    idx = np.flatnonzero(layout.valid)
    for i in idx:
        a_i = _box_area(layout.boxes[i])
        # Canvas relations: rel[0, j] describes element j against the canvas.
        rel[0, i + 1, 0] = _size_code(a_i / 1.0, margin_alpha)
        rel[i + 1, 0, 0] = SIZE_CONJUGATE[rel[0, i + 1, 0]]
        cy = layout.boxes[i][1]
        third = POS_ABOVE if cy < 1 / 3 else (POS_BELOW if cy > 2 / 3 else POS_OVERLAP)
        rel[0, i + 1, 1] = third
        rel[i + 1, 0, 1] = POS_CONJUGATE[third]
        for j in idx:
            if i == j:
                continue
            a_j = _box_area(layout.boxes[j])
            ratio = a_j / a_i if a_i > 0 else np.inf
            rel[i + 1, j + 1, 0] = _size_code(ratio, margin_alpha)
            rel[i + 1, j + 1, 1] = _position_code(layout.boxes[i], layout.boxes[j])
    return RelationMatrix(rel)


def sample_relation_subset(relations: RelationMatrix, fraction: float,
                           rng: np.random.Generator) -> RelationMatrix:
    """Keep each unordered defined pair independently with the given probability.

    A kept pair retains both ordered entries and both channels, so
    antisymmetry survives the subsampling; everything else is zeroed.
    """
    if not (0.0 < fraction <= 1.0):
        raise LayoutError(f"fraction must be in (0, 1], got {fraction}")
    rel = relations.rel
    out = np.zeros_like(rel)
    n = rel.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            if rel[i, j].any() or rel[j, i].any():
                if rng.random() < fraction:
                    out[i, j] = rel[i, j]
                    out[j, i] = rel[j, i]
    return RelationMatrix(out)


def perturb_layout(layout: Layout, sigma: float, rng: np.random.Generator,
                   min_size: float = 1e-6) -> Layout:
    """Add Gaussian noise to the geometry of valid elements.

    Categories and validity are untouched; centers clamp to [0, 1] and sizes
    to [min_size, 1] so the result still satisfies layout invariants.
    """
    if sigma < 0:
        raise LayoutError("sigma must be nonnegative")
    boxes = np.array(layout.boxes)
    if sigma > 0 and layout.valid.any():
        noise = rng.normal(0.0, sigma, size=(int(layout.valid.sum()), 4))
        boxes[layout.valid] += noise
        boxes[:, :2] = np.clip(boxes[:, :2], 0.0, 1.0)
        boxes[:, 2:] = np.clip(boxes[:, 2:], min_size, 1.0)
        boxes[~layout.valid] = layout.boxes[~layout.valid]
    return Layout(np.array(layout.categories), boxes, np.array(layout.valid))


def relation_entries(relations: RelationMatrix) -> list[tuple[int, int, int, int]]:
    """All specified entries as (i, j, channel, code) with code != 0."""
    rel = relations.rel
    out = []
    for i, j, ch in zip(*np.nonzero(rel)):
        out.append((int(i), int(j), int(ch), int(rel[i, j, ch])))
    return out
