"""Training objectives: diffusion loss plus the auxiliary geometric terms.

All auxiliary losses consume the clean-state estimate reconstructed from the
predicted noise and stay differentiable with respect to it wherever the
area floor is inactive. Invalid slots are excluded everywhere, so mutating a
padding row never changes any loss value.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .data import TrainSample
from .diffusion import NoiseSchedule, estimate_x0, q_sample
from .geometry import downsample_area, mean_saliency, parse_boxes, pairwise_intersection, soft_masks

log = logging.getLogger(__name__)

AREA_FLOOR = 1e-8


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.2   # relational term
    lambda2: float = 0.4   # content (saliency) term
    lambda3: float = 1.0   # underlay layout term
    gate_fraction: float = 0.3

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3, self.gate_fraction) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class RelLossParams:
    alpha_margin: float = 0.1
    tau_rel: float = 0.6

    def __post_init__(self):
        if not (0.0 < self.alpha_margin < 1.0) or self.tau_rel <= 0:
            raise ValueError(f"bad relational loss params: {self}")


@dataclass
class CombinedLoss:
    total: torch.Tensor
    diff: float
    rel: float
    ctn: float
    lyt: float

    def parts(self) -> dict[str, float]:
        return {"total": float(self.total.detach()), "diff": self.diff,
                "rel": self.rel, "ctn": self.ctn, "lyt": self.lyt}


def diffusion_loss(eps_pred: torch.Tensor, eps: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Mean squared error over the entries of valid slots only."""
    if eps_pred.shape != eps.shape:
        raise ValueError(f"shape mismatch {tuple(eps_pred.shape)} vs {tuple(eps.shape)}")
    mask = valid.to(eps.dtype).unsqueeze(-1).expand_as(eps)
    n = mask.sum()
    if n == 0:
        return torch.zeros((), dtype=eps.dtype)
    return (((eps_pred - eps) ** 2) * mask).sum() / n


def _floored_areas(wh: torch.Tensor) -> torch.Tensor:
    areas = wh[..., 0] * wh[..., 1]
    floored = torch.clamp(areas, min=AREA_FLOOR)
    n_active = int((areas < AREA_FLOOR).sum())
    if n_active:
        log.debug("area floor active on %d boxes", n_active)
    return floored


def size_logits(d_ij: torch.Tensor, p: RelLossParams) -> torch.Tensor:
    """Three-way (smaller, equal, larger) logits from a log area ratio."""
    lo = np.log1p(-p.alpha_margin)
    hi = np.log1p(p.alpha_margin)
    return torch.stack([lo - d_ij, hi - torch.abs(d_ij), d_ij - hi], dim=-1) / p.tau_rel


def relational_loss(x0_tilde: torch.Tensor, intra_codes: np.ndarray,
                    p: RelLossParams) -> torch.Tensor:
    """Masked cross-entropy between predicted size logits and coded labels.

    ``intra_codes`` is the (N, N, 2) intra-layout block of the conditioning
    relation matrix; only ordered pairs with a nonzero size code contribute.
    """
    codes = torch.from_numpy(np.array(intra_codes[..., 0], dtype=np.int64))
    pairs = codes > 0
    if not bool(pairs.any()):
        return torch.zeros((), dtype=x0_tilde.dtype)
    n_categories = x0_tilde.shape[-1] - 4
    _, wh = parse_boxes(x0_tilde, n_categories)
    log_areas = torch.log(_floored_areas(wh))
    d = log_areas[None, :] - log_areas[:, None]  # d[i, j] = log A_j - log A_i
    logits = size_logits(d, p)
    logp = torch.log_softmax(logits, dim=-1)
    labels = (codes[pairs] - 1).clamp(0, 2)
    return -logp[pairs].gather(1, labels[:, None]).mean()


def content_loss(x0_tilde: torch.Tensor, saliency: torch.Tensor, valid: torch.Tensor,
                 tau_sig: float = 1.0, delta_eps: float = 1e-6) -> torch.Tensor:
    """Sum of soft-masked mean saliency under each valid predicted box."""
    if not bool(valid.any()):
        return torch.zeros((), dtype=x0_tilde.dtype)
    n_categories = x0_tilde.shape[-1] - 4
    xyxy, _ = parse_boxes(x0_tilde, n_categories)
    grid_h, grid_w = saliency.shape
    masks = soft_masks(xyxy[valid], grid_h, grid_w, tau_sig)
    return mean_saliency(saliency, masks, delta_eps).sum()


def layout_loss(x0_tilde: torch.Tensor, valid: torch.Tensor, underlay_category: int = 2) -> torch.Tensor:
    """Mean underlay coverage shortfall 1 - max_j inter(u, e_j) / area(e_j).

    Element classes come from the predicted category columns; an underlay
    with no non-underlay elements to cover contributes the full shortfall.
    """
    n_categories = x0_tilde.shape[-1] - 4
    cats = torch.argmax(x0_tilde[..., :n_categories], dim=-1)
    under = valid & (cats == underlay_category)
    others = valid & (cats != underlay_category)
    if not bool(under.any()):
        return torch.zeros((), dtype=x0_tilde.dtype)
    xyxy, wh = parse_boxes(x0_tilde, n_categories)
    if not bool(others.any()):
        return torch.ones((), dtype=x0_tilde.dtype)
    inter = pairwise_intersection(xyxy)
    cover = inter / _floored_areas(wh)[None, :]  # cover[i, j] = covered share of j
    c_max = cover[under][:, others].max(dim=1).values
    return (1.0 - c_max).mean()


def combined_lora_loss(batch: list[TrainSample], model, weights: LossWeights,
                       p: RelLossParams, sched: NoiseSchedule,
                       rng: np.random.Generator, underlay_category: int = 2,
                       tau_sig: float = 1.0, delta_eps: float = 1e-6,
                       content_grid: tuple[int, int] | None = None) -> CombinedLoss:
    """Fine-tuning objective: diffusion loss plus gated auxiliary terms.

    Timesteps are drawn uniformly per sample; the auxiliary terms apply only
    to samples whose timestep falls in the low-noise window
    t <= gate_fraction * T, and the relational term additionally requires the
    sample to carry relation conditions. The saliency map is area-averaged
    onto ``content_grid`` (its own resolution when None) for the soft masks.
    """
    n = len(batch)
    dtype = model.cfg.torch_dtype if hasattr(model, "cfg") else torch.float64
    x0 = torch.stack([torch.from_numpy(np.asarray(s.x0)).to(dtype) for s in batch])
    valid = torch.from_numpy(np.stack([np.asarray(s.valid) for s in batch]))
    t = rng.integers(1, sched.steps + 1, size=n)
    eps = torch.from_numpy(rng.standard_normal(size=x0.shape)).to(dtype)
    x_t = q_sample(x0, t, eps, sched)
    eps_pred = model(x_t, torch.from_numpy(t).long(), [s.cond for s in batch])
    l_diff = diffusion_loss(eps_pred, eps, valid)
    x0_tilde = estimate_x0(x_t, eps_pred, t, sched)

    zero = torch.zeros((), dtype=dtype)
    rel_terms, ctn_terms, lyt_terms = [], [], []
    gate = t <= weights.gate_fraction * sched.steps
    for b, sample in enumerate(batch):
        if not gate[b]:
            rel_terms.append(zero)
            ctn_terms.append(zero)
            lyt_terms.append(zero)
            continue
        if sample.cond.relations.is_empty():
            rel_terms.append(zero)
        else:
            rel_terms.append(relational_loss(x0_tilde[b], sample.cond.relations.intra, p))
        grid = content_grid or sample.cond.canvas.saliency.shape
        sal = torch.from_numpy(downsample_area(sample.cond.canvas.saliency, grid)).to(dtype)
        ctn_terms.append(content_loss(x0_tilde[b], sal, valid[b], tau_sig, delta_eps))
        lyt_terms.append(layout_loss(x0_tilde[b], valid[b], underlay_category))
    l_rel = torch.stack(rel_terms).mean()
    l_ctn = torch.stack(ctn_terms).mean()
    l_lyt = torch.stack(lyt_terms).mean()
    total = l_diff + weights.lambda1 * l_rel + weights.lambda2 * l_ctn + weights.lambda3 * l_lyt
    return CombinedLoss(total=total, diff=float(l_diff.detach()), rel=float(l_rel.detach()),
                        ctn=float(l_ctn.detach()), lyt=float(l_lyt.detach()))
