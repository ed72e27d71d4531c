"""Dual-branch multimodal diffusion transformer for layout denoising.

Three modality encoders (canvas image + saliency, noisy layout state,
partial constraint mask) feed two parallel transformer branches that share
the layout stream: one fuses image and layout tokens, the other fuses mask
and layout tokens and additionally receives a block-diagonal relative
positional bias derived from the pairwise relation codes. Both branches are
modulated by a conditioning vector (timestep + saliency boxes + global image
feature) through adaLN-Zero, so every block starts as the identity. The
layout streams of the two branches are summed and projected to the noise
prediction.

Layout and mask tokens carry no absolute slot embedding, which makes the
model permutation-equivariant over layout slots.

Checkpoints are a single file holding the config as JSON plus named weight
arrays; stable name prefixes: ``enc.image.*``, ``enc.layout.*``,
``enc.mask.*``, ``cond.*``, ``branchA.block.{k}.*``, ``branchB.block.{k}.*``,
``relbias.*``, ``head.*``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import ConditionBundle
from .errors import ConfigError, NumericalError

N_SIZE_CODES = 4
N_POS_CODES = 6


@dataclass(frozen=True)
class ModelConfig:
    d_layout: int = 128
    d_mask: int = 128
    d_image: int = 256
    d_shared: int = 512
    ffn_dim: int = 1024
    depth: int = 12
    heads: int = 8
    image_h: int = 384
    image_w: int = 256
    patch: int = 32
    vit_dim: int = 256
    vit_depth: int = 12
    vit_ffn: int = 2048
    n_slots: int = 10
    n_categories: int = 3
    k_boxes: int = 4
    bias_sites: str = "both"  # relation bias in "layout", "mask", or "both" blocks
    dtype: str = "float64"

    def __post_init__(self):
        if self.d_shared % self.heads != 0:
            raise ConfigError(f"d_shared {self.d_shared} not divisible by heads {self.heads}")
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ConfigError(f"image {self.image_h}x{self.image_w} not divisible by patch {self.patch}")
        if self.d_image != self.vit_dim:
            raise ConfigError("d_image must equal vit_dim (image tokens feed branch A directly)")
        if self.bias_sites not in ("layout", "mask", "both"):
            raise ConfigError(f"unknown bias_sites {self.bias_sites!r}")

    @property
    def n_image_tokens(self) -> int:
        return (self.image_h // self.patch) * (self.image_w // self.patch)

    @property
    def state_dim(self) -> int:
        return self.n_categories + 4

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float64": torch.float64, "float32": torch.float32}[self.dtype]


MODEL_PRESETS: dict[str, ModelConfig] = {
    "paper": ModelConfig(),
    "desk": ModelConfig(
        d_layout=32, d_mask=32, d_image=32, d_shared=64, ffn_dim=128, depth=2,
        heads=2, image_h=96, image_w=64, patch=16, vit_dim=32, vit_depth=2,
        vit_ffn=64, n_slots=8, n_categories=3, k_boxes=4,
    ),
}


def model_preset(name: str, **overrides) -> ModelConfig:
    if name not in MODEL_PRESETS:
        raise ConfigError(f"unknown model preset {name!r}; have {sorted(MODEL_PRESETS)}")
    return replace(MODEL_PRESETS[name], **overrides)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Classic sin/cos timestep features; t=0 maps to [0..0, 1..1]."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def mm_attention(groups: Sequence[tuple[torch.Tensor, torch.Tensor, torch.Tensor]],
                 heads: int, bias: torch.Tensor | None = None) -> list[torch.Tensor]:
    """Joint softmax attention over concatenated token groups.

    Each group supplies already-projected (q, k, v) of shape (B, T_m, d);
    attention runs over the concatenation and the outputs are split back per
    group. ``bias`` is added to the logits, shaped (B, heads, T, T).
    """
    sizes = [g[0].shape[1] for g in groups]
    q = torch.cat([g[0] for g in groups], dim=1)
    k = torch.cat([g[1] for g in groups], dim=1)
    v = torch.cat([g[2] for g in groups], dim=1)
    b, t, d = q.shape
    if d % heads:
        raise ConfigError(f"width {d} not divisible by {heads} heads")
    hd = d // heads

    def split_heads(x):
        return x.view(b, t, heads, hd).transpose(1, 2)  # (B, H, T, hd)

    logits = split_heads(q) @ split_heads(k).transpose(-1, -2) / math.sqrt(hd)
    if bias is not None:
        if bias.shape[-2:] != (t, t):
            raise ConfigError(f"bias shape {tuple(bias.shape)} does not cover {t} tokens")
        logits = logits + bias
    attn = torch.softmax(logits, dim=-1)
    out = (attn @ split_heads(v)).transpose(1, 2).reshape(b, t, d)
    return list(torch.split(out, sizes, dim=1))


class ZeroCodeEmbedding(nn.Module):
    """Embedding table whose code 0 is hardwired to the zero vector."""

    def __init__(self, num_codes: int, dim: int):
        super().__init__()
        self.table = nn.Parameter(torch.zeros(num_codes - 1, dim))

    def forward(self, codes: torch.Tensor) -> torch.Tensor:
        idx = (codes - 1).clamp(min=0)
        emb = self.table[idx]
        return emb * (codes != 0).unsqueeze(-1).to(emb.dtype)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class MMAttention(nn.Module):
    """Per-modality QKV and output projections around joint attention."""

    def __init__(self, dim: int, heads: int, n_groups: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.ModuleList([nn.Linear(dim, 3 * dim) for _ in range(n_groups)])
        self.out = nn.ModuleList([nn.Linear(dim, dim) for _ in range(n_groups)])

    def forward(self, xs: Sequence[torch.Tensor], bias: torch.Tensor | None = None) -> list[torch.Tensor]:
        groups = [tuple(self.qkv[m](x).chunk(3, dim=-1)) for m, x in enumerate(xs)]
        outs = mm_attention(groups, self.heads, bias)
        return [self.out[m](o) for m, o in enumerate(outs)]


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1.0 + scale[:, None, :]) + shift[:, None, :]


class MMBlock(nn.Module):
    """One multimodal transformer block with adaLN-Zero conditioning.

    Every modality keeps its own stream; residual branches are gated by
    zero-initialized scalars so the block is the identity at initialization.
    """

    def __init__(self, dim: int, heads: int, ffn_dim: int, n_groups: int):
        super().__init__()
        self.n_groups = n_groups
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False)
        self.attn = MMAttention(dim, heads, n_groups)
        self.mlp = nn.ModuleList([Mlp(dim, ffn_dim) for _ in range(n_groups)])
        self.mod = nn.ModuleList([nn.Linear(dim, 6 * dim) for _ in range(n_groups)])

    def forward(self, xs: list[torch.Tensor], cond: torch.Tensor,
                bias: torch.Tensor | None = None) -> list[torch.Tensor]:
        mods = [self.mod[m](F.silu(cond)).chunk(6, dim=-1) for m in range(self.n_groups)]
        attn_in = [modulate(self.norm1(x), mods[m][0], mods[m][1]) for m, x in enumerate(xs)]
        attn_out = self.attn(attn_in, bias)
        xs = [x + mods[m][2][:, None, :] * attn_out[m] for m, x in enumerate(xs)]
        mlp_out = [self.mlp[m](modulate(self.norm2(x), mods[m][3], mods[m][4])) for m, x in enumerate(xs)]
        return [x + mods[m][5][:, None, :] * mlp_out[m] for m, x in enumerate(xs)]


class Branch(nn.Module):
    """A stack of MM blocks over two named token streams."""

    def __init__(self, names: tuple[str, str], dims: tuple[int, int], cfg: ModelConfig):
        super().__init__()
        self.names = names
        for name, d in zip(names, dims):
            self.add_module(f"in_{name}", nn.Linear(d, cfg.d_shared))
        self.block = nn.ModuleList(
            [MMBlock(cfg.d_shared, cfg.heads, cfg.ffn_dim, n_groups=2) for _ in range(cfg.depth)])

    def forward(self, streams: Sequence[torch.Tensor], cond: torch.Tensor,
                bias: torch.Tensor | None, label: str) -> list[torch.Tensor]:
        xs = [getattr(self, f"in_{name}")(s) for name, s in zip(self.names, streams)]
        for k, block in enumerate(self.block):
            xs = block(xs, cond, bias)
            for x in xs:
                if not torch.isfinite(x).all():
                    raise NumericalError(f"non-finite activations in {label} block {k}")
        return xs


class ViTBlock(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MMAttention(dim, heads, n_groups=1)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, ffn_dim)

    def forward(self, x):
        x = x + self.attn([self.norm1(x)])[0]
        return x + self.mlp(self.norm2(x))


class ImageEncoder(nn.Module):
    """ViT over the 4-channel canvas (RGB then saliency), patch tokens only."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.patch = nn.Conv2d(4, cfg.vit_dim, kernel_size=cfg.patch, stride=cfg.patch)
        self.pos = nn.Parameter(torch.zeros(1, cfg.n_image_tokens, cfg.vit_dim))
        self.block = nn.ModuleList(
            [ViTBlock(cfg.vit_dim, cfg.heads, cfg.vit_ffn) for _ in range(cfg.vit_depth)])
        self.norm = nn.LayerNorm(cfg.vit_dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.shape[-2:] != (self.cfg.image_h, self.cfg.image_w):
            images = F.interpolate(images, size=(self.cfg.image_h, self.cfg.image_w),
                                   mode="bilinear", align_corners=False)
        x = self.patch(images).flatten(2).transpose(1, 2)  # (B, T, D)
        x = x + self.pos
        for block in self.block:
            x = block(x)
        return self.norm(x)


class LayoutEncoder(nn.Module):
    """Category and geometry columns projected independently and summed."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_categories = cfg.n_categories
        self.cat = nn.Linear(cfg.n_categories, cfg.d_layout)
        self.geo = nn.Linear(4, cfg.d_layout)

    def forward(self, x_t: torch.Tensor) -> torch.Tensor:
        return self.cat(x_t[..., :self.n_categories]) + self.geo(x_t[..., self.n_categories:])


class MaskEncoder(nn.Module):
    """Binary mask rows and known values, split like the layout encoder."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_categories = cfg.n_categories
        c = cfg.n_categories
        self.mask_cat = nn.Linear(c, cfg.d_mask)
        self.mask_geo = nn.Linear(4, cfg.d_mask)
        self.val_cat = nn.Linear(c, cfg.d_mask)
        self.val_geo = nn.Linear(4, cfg.d_mask)

    def forward(self, mask: torch.Tensor, known: torch.Tensor) -> torch.Tensor:
        c = self.n_categories
        return (self.mask_cat(mask[..., :c]) + self.mask_geo(mask[..., c:])
                + self.val_cat(known[..., :c]) + self.val_geo(known[..., c:]))


class CondEncoder(nn.Module):
    """Timestep + saliency boxes + global image feature -> one vector."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.d_shared = cfg.d_shared
        self.time_fc1 = nn.Linear(cfg.d_shared, cfg.d_shared)
        self.time_fc2 = nn.Linear(cfg.d_shared, cfg.d_shared)
        self.boxes = nn.Linear(cfg.k_boxes * 4, cfg.d_shared)
        self.token_mix = nn.Linear(cfg.n_image_tokens, 1)
        self.global_proj = nn.Linear(cfg.d_image, cfg.d_shared)

    def forward(self, t: torch.Tensor, boxes: torch.Tensor, f_image: torch.Tensor) -> torch.Tensor:
        te = sinusoidal_embedding(t.to(boxes.dtype), self.d_shared)
        te = self.time_fc2(F.silu(self.time_fc1(te)))
        g = self.global_proj(self.token_mix(f_image.transpose(1, 2)).squeeze(-1))
        return te + self.boxes(boxes.flatten(1)) + g


class RelationBias(nn.Module):
    """Learnable relation-code embeddings for attention bias and canvas codes.

    All tables map code 0 to exactly zero; the whole module is zero
    initialized and only trained during the fine-tuning stage.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.heads = cfg.heads
        self.bias_sites = cfg.bias_sites
        self.emb_size = ZeroCodeEmbedding(N_SIZE_CODES, cfg.heads)
        self.emb_pos = ZeroCodeEmbedding(N_POS_CODES, cfg.heads)
        self.canvas_size = ZeroCodeEmbedding(N_SIZE_CODES, cfg.d_layout)
        self.canvas_pos = ZeroCodeEmbedding(N_POS_CODES, cfg.d_layout)

    def canvas_embedding(self, canvas_codes: torch.Tensor) -> torch.Tensor:
        """(B, N, 2) canvas relation codes -> (B, N, d_layout)."""
        return self.canvas_size(canvas_codes[..., 0]) + self.canvas_pos(canvas_codes[..., 1])

    def intra_bias(self, intra_codes: torch.Tensor) -> torch.Tensor:
        """(B, N, N, 2) intra-layout codes -> per-head bias (B, H, N, N)."""
        if int(intra_codes[..., 0].max()) >= N_SIZE_CODES or int(intra_codes[..., 1].max()) >= N_POS_CODES:
            raise ConfigError("relation code out of range")
        b = self.emb_size(intra_codes[..., 0]) + self.emb_pos(intra_codes[..., 1])
        return b.permute(0, 3, 1, 2)

    def attention_bias(self, intra_codes: torch.Tensor, group_sizes: tuple[int, int]) -> torch.Tensor:
        """Block-diagonal bias over [mask tokens, layout tokens].

        Cross-modal entries are exactly zero; the same relation codes bias
        the mask-mask and/or layout-layout blocks depending on the
        configured sites.
        """
        n_mask, n_layout = group_sizes
        batch = intra_codes.shape[0]
        total = n_mask + n_layout
        bias = torch.zeros(batch, self.heads, total, total, dtype=self.emb_size.table.dtype)
        blocks = self.intra_bias(intra_codes)
        if self.bias_sites in ("mask", "both"):
            bias[:, :, :n_mask, :n_mask] = blocks
        if self.bias_sites in ("layout", "both"):
            bias[:, :, n_mask:, n_mask:] = blocks
        return bias


class Head(nn.Module):
    """Final modulated norm and projection to the noise prediction."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm = nn.LayerNorm(cfg.d_shared, elementwise_affine=False)
        self.mod = nn.Linear(cfg.d_shared, 2 * cfg.d_shared)
        self.out = nn.Linear(cfg.d_shared, cfg.state_dim)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        shift, scale = self.mod(F.silu(cond)).chunk(2, dim=-1)
        return self.out(modulate(self.norm(x), shift, scale))


def collate_conditions(conds: Sequence[ConditionBundle], cfg: ModelConfig,
                       dtype: torch.dtype) -> dict[str, torch.Tensor]:
    """Stack condition bundles into model-ready tensors.

    Saliency boxes are sorted largest-area-first and truncated or zero-padded
    to ``cfg.k_boxes``. Image channels are ordered RGB then saliency.
    """
    images, masks, knowns, intra, canvas_codes, boxes = [], [], [], [], [], []
    for c in conds:
        img = np.concatenate([c.canvas.image, c.canvas.saliency[..., None]], axis=2)
        images.append(torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).to(dtype))
        masks.append(torch.from_numpy(np.array(c.mask.mask)).to(dtype))
        knowns.append(torch.from_numpy(np.array(c.mask.known_values)).to(dtype))
        intra.append(torch.from_numpy(np.array(c.relations.intra)))
        canvas_codes.append(torch.from_numpy(np.array(c.relations.canvas_row)))
        sb = sorted(c.canvas.saliency_boxes, key=lambda b: b[2] * b[3], reverse=True)[:cfg.k_boxes]
        padded = list(sb) + [(0.0, 0.0, 0.0, 0.0)] * (cfg.k_boxes - len(sb))
        boxes.append(torch.tensor(padded, dtype=dtype))
    return {
        "images": torch.stack(images),
        "mask": torch.stack(masks),
        "known": torch.stack(knowns),
        "intra": torch.stack(intra),
        "canvas_codes": torch.stack(canvas_codes),
        "boxes": torch.stack(boxes),
    }


class DualBranchDenoiser(nn.Module):
    """The full noise-prediction network eps(x_t, t, conditions)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.n_slots = cfg.n_slots
        self.n_categories = cfg.n_categories
        self.state_dim = cfg.state_dim
        self.enc = nn.ModuleDict({
            "image": ImageEncoder(cfg),
            "layout": LayoutEncoder(cfg),
            "mask": MaskEncoder(cfg),
        })
        self.cond = CondEncoder(cfg)
        self.branchA = Branch(("image", "layout"), (cfg.d_image, cfg.d_layout), cfg)
        self.branchB = Branch(("mask", "layout"), (cfg.d_mask, cfg.d_layout), cfg)
        self.relbias = RelationBias(cfg)
        self.head = Head(cfg)
        self.to(cfg.torch_dtype)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor,
                conds: Sequence[ConditionBundle]) -> torch.Tensor:
        if x_t.dim() != 3 or x_t.shape[1:] != (self.n_slots, self.state_dim):
            raise ConfigError(f"x_t must be (B, {self.n_slots}, {self.state_dim}), got {tuple(x_t.shape)}")
        batch = collate_conditions(conds, self.cfg, x_t.dtype)
        f_image = self.enc["image"](batch["images"])
        f_layout = self.enc["layout"](x_t) + self.relbias.canvas_embedding(batch["canvas_codes"])
        f_mask = self.enc["mask"](batch["mask"], batch["known"])
        f_cond = self.cond(t, batch["boxes"], f_image)
        bias = self.relbias.attention_bias(batch["intra"], (self.n_slots, self.n_slots))
        _, a_layout = self.branchA([f_image, f_layout], f_cond, None, "branchA")
        _, b_layout = self.branchB([f_mask, f_layout], f_cond, bias, "branchB")
        return self.head(a_layout + b_layout, f_cond)

    def predict_eps(self, x_t, t, conds):
        return self.forward(x_t, t, conds)


def _name_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def init_weights(model: nn.Module, seed: int, std: float = 0.02) -> None:
    """Deterministic per-parameter initialization keyed by parameter name.

    Because each tensor draws from its own named stream, models that share
    submodule names (e.g. different depths) get identical weights for the
    parts they share. Modulation layers and relation tables start at zero;
    layer norm weights start at one.
    """
    for name, p in model.named_parameters():
        with torch.no_grad():
            if "relbias." in name or ".mod." in name:
                p.zero_()
            elif name.endswith(".bias"):
                p.zero_()
            elif ".norm" in name and name.endswith(".weight"):
                p.fill_(1.0)
            else:
                gen = torch.Generator().manual_seed(_name_seed(seed, name))
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)


def build_model(cfg: ModelConfig, seed: int = 1) -> DualBranchDenoiser:
    model = DualBranchDenoiser(cfg)
    init_weights(model, seed)
    return model


def save_checkpoint(path, model: DualBranchDenoiser, extra: dict | None = None) -> None:
    """Single-archive checkpoint: config JSON + named weight arrays."""
    payload = {
        "model_config": json.dumps(asdict(model.cfg), sort_keys=True),
        "state": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[DualBranchDenoiser, dict]:
    payload = torch.load(path, weights_only=False)
    cfg = ModelConfig(**json.loads(payload["model_config"]))
    model = DualBranchDenoiser(cfg)
    model.load_state_dict(payload["state"])
    return model, payload.get("extra", {})
