"""Evaluation metrics for generated layouts.

Content metrics read the canvas (occlusion = saliency density under
elements, unreadability = image gradient under text); graphic metrics are
purely geometric (underlay effectiveness, pairwise overlay); the relation
violation rate re-extracts relations from the generated layout and compares
them to the conditioning subset. Metrics over empty contributing sets are
reported as absent (None), never as zero.

The distribution metric is a small-scale stand-in: a layout autoencoder is
fitted once on the reference split and the Frechet distance is computed
between Gaussian fits of its bottleneck features. Values are not comparable
to any published layout FID.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg
import torch
from torch import nn

from .core import Canvas, Layout, RelationMatrix, encode_layout, extract_relations, relation_entries
from .geometry import Box, coverage, iou, pixel_mean_in_box

STRICT_CONTAINMENT_TOL = 1e-6
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass
class MetricReport:
    occ: float | None = None
    rea: float | None = None
    und_loose: float | None = None
    und_strict: float | None = None
    ove: float | None = None
    vio: float | None = None
    fid_proxy: float | None = None
    counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def occlusion(layout: Layout, canvas: Canvas) -> float | None:
    """Mean saliency density under the (clipped) boxes of valid elements."""
    boxes = [el.box for el in layout.elements()]
    if not boxes:
        return None
    return float(np.mean([pixel_mean_in_box(canvas.saliency, b) for b in boxes]))


def _gradient_magnitude(image: np.ndarray) -> np.ndarray:
    luma = image @ LUMA_WEIGHTS
    gy, gx = np.gradient(luma)
    return np.sqrt(gx ** 2 + gy ** 2)


def unreadability(layout: Layout, canvas: Canvas, text_category: int = 1) -> float | None:
    """Mean luminance-gradient magnitude under text boxes; absent without text."""
    texts = [el.box for el in layout.elements() if el.category == text_category]
    if not texts:
        return None
    grad = _gradient_magnitude(canvas.image)
    return float(np.mean([pixel_mean_in_box(grad, b) for b in texts]))


def underlay_effectiveness(layout: Layout, underlay_category: int = 2) -> tuple[float, float] | None:
    """(loose, strict) underlay coverage scores; absent without underlays."""
    unders, others = [], []
    for el in layout.elements():
        (unders if el.category == underlay_category else others).append(Box.from_cxcywh(*el.box))
    if not unders:
        return None
    loose_scores, strict_scores = [], []
    for u in unders:
        best = max((coverage(e, u) for e in others), default=0.0)
        loose_scores.append(best)
        strict_scores.append(1.0 if best >= 1.0 - STRICT_CONTAINMENT_TOL else 0.0)
    return float(np.mean(loose_scores)), float(np.mean(strict_scores))


def overlay(layout: Layout, underlay_category: int = 2) -> float | None:
    """Mean IoU over unordered pairs of valid non-underlay elements."""
    boxes = [Box.from_cxcywh(*el.box) for el in layout.elements()
             if el.category != underlay_category]
    if len(boxes) < 2:
        return None
    vals = [iou(a, b) for k, a in enumerate(boxes) for b in boxes[k + 1:]]
    return float(np.mean(vals))


def violation_rate(generated: Layout, relations_given: RelationMatrix,
                   margin_alpha: float = 0.1) -> float | None:
    """Share of specified relation entries the generated layout breaks.

    Both channels count. An entry referencing a slot the generated layout
    leaves invalid is a violation.
    """
    entries = relation_entries(relations_given)
    if not entries:
        return None
    extracted = extract_relations(generated, margin_alpha).rel
    violated = 0
    for i, j, ch, code in entries:
        slots_ok = all(generated.valid[k - 1] for k in (i, j) if k > 0)
        if not slots_ok or extracted[i, j, ch] != code:
            violated += 1
    return violated / len(entries)


def frechet_distance(features_a: np.ndarray, features_b: np.ndarray,
                     eps: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    When either set has no more samples than feature dimensions, eps * I is
    added to both covariances to keep the matrix square root well posed.
    """
    mu_a, mu_b = features_a.mean(axis=0), features_b.mean(axis=0)
    cov_a = np.cov(features_a, rowvar=False)
    cov_b = np.cov(features_b, rowvar=False)
    dim = features_a.shape[1]
    if min(features_a.shape[0], features_b.shape[0]) <= dim:
        cov_a = cov_a + eps * np.eye(dim)
        cov_b = cov_b + eps * np.eye(dim)
    sqrt_prod, _ = scipy.linalg.sqrtm(cov_a @ cov_b, disp=False)
    if np.iscomplexobj(sqrt_prod):
        sqrt_prod = sqrt_prod.real
    dist = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a + cov_b - 2.0 * sqrt_prod))
    return max(dist, 0.0)


class LayoutFeatureExtractor(nn.Module):
    """Tiny layout autoencoder; the bottleneck is the feature vector."""

    def __init__(self, n_slots: int, n_categories: int, feature_dim: int = 16, hidden: int = 64):
        super().__init__()
        self.n_slots = n_slots
        self.n_categories = n_categories
        in_dim = n_slots * (n_categories + 4)
        self.encoder = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(),
                                     nn.Linear(hidden, feature_dim))
        self.decoder = nn.Sequential(nn.Linear(feature_dim, hidden), nn.ReLU(),
                                     nn.Linear(hidden, in_dim))
        self.to(torch.float64)

    def _inputs(self, layouts: list[Layout]) -> torch.Tensor:
        rows = [encode_layout(l, self.n_categories, self.n_slots).reshape(-1) for l in layouts]
        return torch.from_numpy(np.stack(rows))

    def forward(self, x):
        return self.decoder(self.encoder(x))

    @torch.no_grad()
    def features(self, layouts: list[Layout]) -> np.ndarray:
        return self.encoder(self._inputs(layouts)).numpy()


def train_feature_extractor(reference: list[Layout], n_slots: int, n_categories: int,
                            seed: int = 1, feature_dim: int = 16,
                            epochs: int = 300, lr: float = 1e-2) -> LayoutFeatureExtractor:
    """Fit the autoencoder on the reference split by full-batch reconstruction."""
    model = LayoutFeatureExtractor(n_slots, n_categories, feature_dim)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            if p.dim() > 1:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.1)
            else:
                p.zero_()
    x = model._inputs(reference)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    for _ in range(epochs):
        opt.zero_grad()
        loss = ((model(x) - x) ** 2).mean()
        loss.backward()
        opt.step()
    model.eval()
    return model


def fid_proxy(generated: list[Layout], reference: list[Layout], n_slots: int,
              n_categories: int, extractor: LayoutFeatureExtractor | None = None,
              seed: int = 1) -> float:
    """Frechet distance between generated and reference layout feature sets."""
    if extractor is None:
        extractor = train_feature_extractor(reference, n_slots, n_categories, seed)
    return frechet_distance(extractor.features(generated), extractor.features(reference))


PER_SAMPLE_KEYS = ("occ", "rea", "und_loose", "und_strict", "ove", "vio")


def sample_metrics(generated: Layout, canvas: Canvas,
                   relations_given: RelationMatrix | None = None,
                   text_category: int = 1, underlay_category: int = 2,
                   margin_alpha: float = 0.1) -> dict[str, float | None]:
    """All per-sample metrics for one generated layout."""
    und = underlay_effectiveness(generated, underlay_category)
    out = {
        "occ": occlusion(generated, canvas),
        "rea": unreadability(generated, canvas, text_category),
        "und_loose": und[0] if und else None,
        "und_strict": und[1] if und else None,
        "ove": overlay(generated, underlay_category),
        "vio": None,
    }
    if relations_given is not None and not relations_given.is_empty():
        out["vio"] = violation_rate(generated, relations_given, margin_alpha)
    return out


def aggregate_metrics(per_sample: list[dict[str, float | None]],
                      fid: float | None = None) -> MetricReport:
    """Average per-sample metrics over the samples where each is defined."""
    report = MetricReport(fid_proxy=fid)
    counts = {}
    for key in PER_SAMPLE_KEYS:
        values = [m[key] for m in per_sample if m.get(key) is not None]
        counts[key] = len(values)
        if values:
            setattr(report, key, float(np.mean(values)))
    counts["samples"] = len(per_sample)
    report.counts = counts
    return report
