"""Low-rank adapters over the mask-layout branch attention projections.

A wrapped projection computes ``P x + alpha * B (A x)`` with the base P
frozen, A drawn from a small Gaussian, and B starting at zero, so a freshly
wrapped model is bit-identical to its base. Adapters serialize separately
from the base checkpoint and can be folded into the base weights with
:func:`merge`.
"""

from __future__ import annotations

import fnmatch
import hashlib

import torch
import torch.nn.functional as F
from torch import nn

from .errors import AlreadyMergedError, ConfigError

DEFAULT_TARGETS = "branchB.block*.attn.*"


class LoraLinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int, alpha: float, init_seed: int):
        super().__init__()
        if rank >= min(base.in_features, base.out_features):
            raise ConfigError(f"rank {rank} not small against {base.out_features}x{base.in_features}")
        self.base = base
        self.rank = rank
        self.alpha = alpha
        dtype = base.weight.dtype
        gen = torch.Generator().manual_seed(init_seed)
        a = torch.randn(rank, base.in_features, generator=gen, dtype=dtype) * 0.01
        self.lora_a = nn.Parameter(a)
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank, dtype=dtype))
        self.base.weight.requires_grad_(False)
        if self.base.bias is not None:
            self.base.bias.requires_grad_(False)

    def forward(self, x):
        return self.base(x) + self.alpha * F.linear(F.linear(x, self.lora_a), self.lora_b)

    def delta_weight(self) -> torch.Tensor:
        return self.alpha * (self.lora_b @ self.lora_a)


def _replace_module(model: nn.Module, qualified: str, new: nn.Module) -> None:
    parent_name, _, attr = qualified.rpartition(".")
    parent = model.get_submodule(parent_name) if parent_name else model
    if isinstance(parent, (nn.ModuleList, nn.ModuleDict)):
        parent[int(attr) if isinstance(parent, nn.ModuleList) else attr] = new
    else:
        setattr(parent, attr, new)


def wrap_projections(model: nn.Module, targets: str = DEFAULT_TARGETS,
                     rank: int = 4, alpha: float = 3.0, seed: int = 1,
                     include_output: bool = True) -> list[str]:
    """Wrap every linear projection matching the target pattern.

    Returns the wrapped module names. Raises when the pattern matches
    nothing, which usually means a typo in the target spec.
    """
    matched = []
    for name, module in list(model.named_modules()):
        if not isinstance(module, nn.Linear):
            continue
        if not fnmatch.fnmatch(name, targets):
            continue
        if not include_output and fnmatch.fnmatch(name, "*.attn.out.*"):
            continue
        matched.append(name)
    if not matched:
        raise ConfigError(f"LoRA target pattern {targets!r} matched no linear projections")
    for name in matched:
        base = model.get_submodule(name)
        init_seed = int.from_bytes(hashlib.sha256(f"{seed}:lora:{name}".encode()).digest()[:8], "little") & (2**63 - 1)
        _replace_module(model, name, LoraLinear(base, rank, alpha, init_seed))
    return matched


def iter_adapters(model: nn.Module):
    for name, module in model.named_modules():
        if isinstance(module, LoraLinear):
            yield name, module


def set_trainable(model: nn.Module, stage: str) -> dict[str, list[str]]:
    """Apply the stage freeze policy and return the parameter partition.

    Pre-training trains everything except the relation injection tables,
    which stay zeroed. Fine-tuning trains only the LoRA factors plus those
    relation tables (including the canvas-relation embedding).
    """
    if stage not in ("pretrain", "finetune"):
        raise ConfigError(f"unknown stage {stage!r}")
    partition: dict[str, list[str]] = {"trainable": [], "frozen": []}
    for name, p in model.named_parameters():
        is_relation = "relbias." in name
        is_lora = "lora_a" in name or "lora_b" in name
        if stage == "pretrain":
            trainable = not is_relation and not is_lora
        else:
            trainable = is_relation or is_lora
        p.requires_grad_(trainable)
        partition["trainable" if trainable else "frozen"].append(name)
    return partition


def merge(model: nn.Module) -> nn.Module:
    """Fold all adapters into their base projections and drop them."""
    adapters = list(iter_adapters(model))
    if not adapters:
        raise AlreadyMergedError("no adapters present (already merged or never wrapped)")
    for name, adapter in adapters:
        base = adapter.base
        fused = nn.Linear(base.in_features, base.out_features,
                          bias=base.bias is not None, dtype=base.weight.dtype)
        with torch.no_grad():
            fused.weight.copy_(base.weight + adapter.delta_weight())
            if base.bias is not None:
                fused.bias.copy_(base.bias)
        _replace_module(model, name, fused)
    return model


def adapter_state(model: nn.Module) -> dict:
    """Serialize adapters as a small standalone checkpoint payload."""
    state = {}
    for name, adapter in iter_adapters(model):
        state[name] = {
            "a": adapter.lora_a.detach().clone(),
            "b": adapter.lora_b.detach().clone(),
            "rank": adapter.rank,
            "alpha": adapter.alpha,
        }
    return state


def load_adapter_state(model: nn.Module, state: dict, seed: int = 1) -> None:
    """Wrap a base model and load serialized adapter factors onto it."""
    if next(iter_adapters(model), None) is None:
        first = next(iter(state.values()))
        names = wrap_projections(model, targets=DEFAULT_TARGETS, rank=first["rank"],
                                 alpha=first["alpha"], seed=seed)
        missing = set(state) - set(names)
        if missing:
            raise ConfigError(f"adapter state for unknown targets: {sorted(missing)}")
    for name, adapter in iter_adapters(model):
        if name not in state:
            raise ConfigError(f"no adapter state for wrapped projection {name}")
        with torch.no_grad():
            adapter.lora_a.copy_(state[name]["a"])
            adapter.lora_b.copy_(state[name]["b"])
