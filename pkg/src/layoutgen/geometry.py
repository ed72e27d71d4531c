"""Geometric primitives shared by the losses and the evaluation metrics.

Scalar box operations work on plain ``Box`` values; the loss functions use
the torch variants at the bottom of the module, which stay differentiable
with respect to box coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class Box:
    """Axis-aligned box with canonicalized corners (x1 <= x2, y1 <= y2)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        x1, x2 = sorted((float(self.x1), float(self.x2)))
        y1, y2 = sorted((float(self.y1), float(self.y2)))
        object.__setattr__(self, "x1", x1)
        object.__setattr__(self, "x2", x2)
        object.__setattr__(self, "y1", y1)
        object.__setattr__(self, "y2", y2)

    @staticmethod
    def from_cxcywh(cx: float, cy: float, w: float, h: float) -> "Box":
        return Box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


@dataclass(frozen=True)
class SoftMaskGrid:
    """Sigmoid box mask sampled on an H' x W' pixel grid, values in (0, 1)."""

    values: torch.Tensor
    height: int
    width: int


def area(b: Box) -> float:
    return (b.x2 - b.x1) * (b.y2 - b.y1)


def intersection(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    return iw * ih


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 when the union is degenerate."""
    inter = intersection(a, b)
    union = area(a) + area(b) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def coverage(inner: Box, outer: Box) -> float:
    """Fraction of ``inner`` covered by ``outer``; 0 for a zero-area inner box."""
    a_inner = area(inner)
    if a_inner <= 0.0:
        return 0.0
    return intersection(inner, outer) / a_inner


def soft_mask(b: Box, grid: tuple[int, int], tau_sig: float = 1.0) -> SoftMaskGrid:
    """Differentiable four-sigmoid box mask on a pixel grid.

    The box is scaled from normalized units to the grid's pixel units before
    evaluation, so ``tau_sig`` sets the transition band width in pixels.
    """
    h, w = grid
    xyxy = torch.tensor([b.x1, b.y1, b.x2, b.y2], dtype=torch.float64)
    values = soft_masks(xyxy.unsqueeze(0), h, w, tau_sig)[0]
    return SoftMaskGrid(values=values, height=h, width=w)


def soft_masks(boxes_xyxy: torch.Tensor, grid_h: int, grid_w: int,
               tau_sig: float) -> torch.Tensor:
    """Batched soft masks: (N, 4) normalized xyxy boxes -> (N, H', W')."""
    dtype = boxes_xyxy.dtype
    u = (torch.arange(grid_w, dtype=dtype) + 0.5)  # pixel-center columns
    v = (torch.arange(grid_h, dtype=dtype) + 0.5)  # pixel-center rows
    x1 = boxes_xyxy[:, 0, None] * grid_w
    y1 = boxes_xyxy[:, 1, None] * grid_h
    x2 = boxes_xyxy[:, 2, None] * grid_w
    y2 = boxes_xyxy[:, 3, None] * grid_h
    fx = torch.sigmoid(tau_sig * (u - x1)) * torch.sigmoid(tau_sig * (x2 - u))  # (N, W')
    fy = torch.sigmoid(tau_sig * (v - y1)) * torch.sigmoid(tau_sig * (y2 - v))  # (N, H')
    return fy[:, :, None] * fx[:, None, :]


def mean_saliency(saliency: torch.Tensor, mask: SoftMaskGrid | torch.Tensor,
                  delta_eps: float = 1e-6) -> torch.Tensor:
    """Soft average of saliency under a mask: sum(S*M) / (sum(M) + delta_eps)."""
    m = mask.values if isinstance(mask, SoftMaskGrid) else mask
    if saliency.shape != m.shape[-2:]:
        raise ValueError(f"saliency {tuple(saliency.shape)} does not match mask grid {tuple(m.shape[-2:])}")
    num = (saliency * m).sum(dim=(-2, -1))
    den = m.sum(dim=(-2, -1)) + delta_eps
    return num / den


def pixel_mean_in_box(values: np.ndarray, box_cxcywh) -> float:
    """Mean of a 2D map over pixels whose centers fall in the (clipped) box.

    This is the hard-box counting route used by the evaluation metrics; it
    returns 0 when no pixel center lands inside the box.
    """
    h, w = values.shape
    cx, cy, bw, bh = box_cxcywh
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    rows = (ys >= cy - bh / 2) & (ys < cy + bh / 2)
    cols = (xs >= cx - bw / 2) & (xs < cx + bw / 2)
    if not rows.any() or not cols.any():
        return 0.0
    return float(values[np.ix_(rows, cols)].mean())


def downsample_area(values: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Exact area-averaged downsample of a 2D map to an arbitrary grid.

    Each output cell averages the input over its footprint, weighting input
    pixels by fractional overlap, so the result is resolution-consistent.
    """
    h_in, w_in = values.shape
    h_out, w_out = grid
    if (h_in, w_in) == (h_out, w_out):
        return np.array(values, dtype=np.float64)

    def overlap_weights(n_in: int, n_out: int) -> np.ndarray:
        edges_in = np.arange(n_in + 1) / n_in
        edges_out = np.arange(n_out + 1) / n_out
        w = np.zeros((n_out, n_in))
        for o in range(n_out):
            lo, hi = edges_out[o], edges_out[o + 1]
            start = np.maximum(edges_in[:-1], lo)
            stop = np.minimum(edges_in[1:], hi)
            w[o] = np.clip(stop - start, 0.0, None)
        return w / w.sum(axis=1, keepdims=True)

    wy = overlap_weights(h_in, h_out)
    wx = overlap_weights(w_in, w_out)
    return wy @ np.asarray(values, dtype=np.float64) @ wx.T


# Torch helpers used by the differentiable losses. Boxes parsed from the
# continuous layout state keep raw (possibly negative) widths so gradients
# flow; downstream consumers floor areas where a log or division needs it.

def parse_boxes(x0: torch.Tensor, n_categories: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Split geometry columns of a continuous layout state.

    Returns (xyxy, wh): both differentiable, unclamped, in normalized units.
    Accepts (N, C+4) or (B, N, C+4).
    """
    geo = (x0[..., n_categories:] + 1.0) / 2.0
    cx, cy, w, h = geo.unbind(-1)
    xyxy = torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)
    return xyxy, torch.stack([w, h], dim=-1)


def pairwise_intersection(xyxy: torch.Tensor) -> torch.Tensor:
    """All-pairs intersection areas for one set of (N, 4) xyxy boxes."""
    x1, y1, x2, y2 = xyxy.unbind(-1)
    iw = torch.clamp(torch.minimum(x2[:, None], x2[None, :]) - torch.maximum(x1[:, None], x1[None, :]), min=0.0)
    ih = torch.clamp(torch.minimum(y2[:, None], y2[None, :]) - torch.maximum(y1[:, None], y1[None, :]), min=0.0)
    return iw * ih
