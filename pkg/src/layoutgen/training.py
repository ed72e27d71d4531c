"""Two-stage training orchestration, checkpointing, and evaluation.

Pre-training optimizes the plain diffusion loss over the four base tasks;
fine-tuning wraps the mask-layout branch projections with LoRA, unfreezes
the relation tables, adds the relation task to the sampling pool, and
optimizes the combined objective. Everything is deterministic under a fixed
seed in single-threaded mode: data order, task draws, timesteps, noise, and
sampling all derive from named seed streams.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .config import EvalConfig, RunConfig, StageConfig
from .core import (ConditionBundle, HybridTask, Layout, RelationMatrix, TaskKind,
                   build_hybrid_task, build_task_mask, encode_layout, extract_relations,
                   perturb_layout, sample_relation_subset)
from .data import Sample, TrainSample, task_sampler
from .denoiser import DualBranchDenoiser, load_checkpoint, save_checkpoint
from .diffusion import NoiseSchedule, SamplerConfig, ddim_sample_batch, make_schedule, refine
from .errors import ConfigError, NumericalError
from .losses import CombinedLoss, LossWeights, combined_lora_loss
from .lora import adapter_state, load_adapter_state, set_trainable, wrap_projections
from .metrics import (MetricReport, aggregate_metrics, sample_metrics,
                      train_feature_extractor, frechet_distance)

ADAM_BETAS = (0.9, 0.999)


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a tuple of identifiers."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def make_train_sample(sample: Sample, task: TaskKind, n_categories: int,
                      rng: np.random.Generator, stage: StageConfig) -> TrainSample:
    """Turn a dataset sample into an encoded, conditioned training example."""
    layout = sample.layout
    mask = build_task_mask(task, layout, n_categories, rng, stage.completion_keep_prob)
    if task is TaskKind.RELATIONSHIP:
        full = extract_relations(layout, stage.margin_alpha)
        relations = sample_relation_subset(full, stage.relation_fraction, rng)
    else:
        relations = RelationMatrix.zeros(layout.capacity)
    cond = ConditionBundle(canvas=sample.canvas, mask=mask, relations=relations, task=task)
    x0 = encode_layout(layout, n_categories, layout.capacity)
    return TrainSample(x0=x0, valid=np.array(layout.valid), cond=cond)


def _train_loop(model: DualBranchDenoiser, samples: Sequence[Sample], stage: StageConfig,
                sched: NoiseSchedule, weights: LossWeights, stage_name: str,
                underlay_category: int, log_fn: Callable[[dict], None] | None = None) -> list[dict]:
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise ConfigError(f"no trainable parameters for stage {stage_name}")
    opt = torch.optim.Adam(params, lr=stage.learning_rate, betas=ADAM_BETAS)
    rng = np.random.default_rng(derive_seed(stage.seed, stage_name))
    tasks = task_sampler(stage.mixture, rng)
    n_categories = model.n_categories
    curve: list[dict] = []
    step = 0
    steps_per_epoch = math.ceil(len(samples) / stage.batch_size)
    for epoch in range(stage.epochs):
        order = rng.permutation(len(samples))
        for b in range(steps_per_epoch):
            idx = order[b * stage.batch_size:(b + 1) * stage.batch_size]
            batch = [make_train_sample(samples[i], next(tasks), n_categories, rng, stage)
                     for i in idx]
            loss = combined_lora_loss(batch, model, weights, stage.rel_params, sched, rng,
                                      underlay_category=underlay_category,
                                      tau_sig=stage.tau_sig, delta_eps=stage.delta_eps)
            if not torch.isfinite(loss.total):
                raise NumericalError(f"non-finite loss at {stage_name} epoch {epoch} step {step}")
            opt.zero_grad()
            loss.total.backward()
            opt.step()
            entry = {"stage": stage_name, "epoch": epoch, "step": step,
                     "lr": stage.learning_rate, **loss.parts()}
            curve.append(entry)
            if log_fn:
                log_fn(entry)
            step += 1
    return curve


def pretrain(model: DualBranchDenoiser, samples: Sequence[Sample], stage: StageConfig,
             sched: NoiseSchedule, underlay_category: int = 2,
             log_fn: Callable[[dict], None] | None = None) -> list[dict]:
    """Multi-task pre-training with the diffusion loss only."""
    set_trainable(model, "pretrain")
    no_aux = LossWeights(0.0, 0.0, 0.0, 0.0)
    return _train_loop(model, samples, stage, sched, no_aux, "pretrain",
                       underlay_category, log_fn)


def finetune(model: DualBranchDenoiser, samples: Sequence[Sample], stage: StageConfig,
             sched: NoiseSchedule, underlay_category: int = 2,
             log_fn: Callable[[dict], None] | None = None) -> list[dict]:
    """LoRA fine-tuning with relation conditioning and auxiliary losses.

    The model must be a loaded base checkpoint; projections are wrapped here
    and the freeze policy applied before any step.
    """
    wrap_projections(model, targets=stage.lora_targets, rank=stage.lora_rank,
                     alpha=stage.lora_alpha, seed=stage.seed,
                     include_output=stage.lora_include_output)
    set_trainable(model, "finetune")
    return _train_loop(model, samples, stage, sched, stage.loss_weights, "finetune",
                       underlay_category, log_fn)


def save_finetuned(path: Path, model: DualBranchDenoiser, base_filename: str) -> None:
    """Adapter checkpoint: LoRA factors + relation tables + base reference."""
    relbias = {k: v.detach().clone() for k, v in model.state_dict().items()
               if k.startswith("relbias.")}
    torch.save({"adapters": adapter_state(model), "relbias": relbias,
                "base": base_filename}, path)


def load_model(path: Path) -> DualBranchDenoiser:
    """Load a full checkpoint, or an adapter checkpoint onto its base."""
    path = Path(path)
    payload = torch.load(path, weights_only=False)
    if "adapters" not in payload:
        model, _ = load_checkpoint(path)
        return model
    base_path = Path(payload["base"])
    if not base_path.is_absolute():
        base_path = path.parent / base_path
    model, _ = load_checkpoint(base_path)
    load_adapter_state(model, payload["adapters"])
    state = model.state_dict()
    state.update(payload["relbias"])
    model.load_state_dict(state)
    return model


def _parse_task(task_str: str) -> TaskKind | list[TaskKind]:
    parts = [TaskKind(p) for p in task_str.split("+")]
    return parts[0] if len(parts) == 1 else parts


def build_eval_condition(sample: Sample, task_str: str, n_categories: int,
                         eval_cfg: EvalConfig, rng: np.random.Generator) -> ConditionBundle:
    """Conditioning for one evaluation sample; hybrids compose with '+'."""
    layout = sample.layout
    parsed = _parse_task(task_str)
    if isinstance(parsed, list):
        hybrid = build_hybrid_task(parsed, layout, n_categories, rng,
                                   relation_fraction=eval_cfg.relation_fraction,
                                   margin_alpha=eval_cfg.margin_alpha)
        relations = hybrid.relations or RelationMatrix.zeros(layout.capacity)
        return ConditionBundle(sample.canvas, hybrid.mask, relations, hybrid)
    task = parsed
    mask = build_task_mask(task, layout, n_categories, rng)
    if task is TaskKind.RELATIONSHIP:
        relations = sample_relation_subset(extract_relations(layout, eval_cfg.margin_alpha),
                                           eval_cfg.relation_fraction, rng)
    else:
        relations = RelationMatrix.zeros(layout.capacity)
    return ConditionBundle(sample.canvas, mask, relations, task)


def evaluate(model: DualBranchDenoiser, test_samples: Sequence[Sample], cfg: RunConfig,
             sched: NoiseSchedule | None = None,
             tasks: Sequence[str] | None = None) -> dict[str, tuple[MetricReport, list[dict]]]:
    """Sample one layout per test canvas per task and compute all metrics.

    Deterministic given the run seed: conditioning and sampling noise derive
    from (seed, task, sample id). The distribution metric shares one feature
    extractor fitted on the ground-truth test layouts.
    """
    sched = sched or make_schedule(cfg.schedule.steps, cfg.schedule.beta_start, cfg.schedule.beta_end)
    tasks = list(tasks or cfg.eval.tasks)
    n_categories = model.n_categories
    reference = [s.layout for s in test_samples]
    extractor = train_feature_extractor(reference, model.n_slots, n_categories,
                                        seed=derive_seed(cfg.seed, "fid"),
                                        feature_dim=cfg.eval.fid_feature_dim,
                                        epochs=cfg.eval.fid_epochs)
    ref_features = extractor.features(reference)
    results: dict[str, tuple[MetricReport, list[dict]]] = {}
    for task_str in tasks:
        conds, generated = [], []
        for s in test_samples:
            rng = np.random.default_rng(derive_seed(cfg.seed, "cond", task_str, s.id))
            conds.append(build_eval_condition(s, task_str, n_categories, cfg.eval, rng))
        if task_str == TaskKind.REFINEMENT.value:
            for s, cond in zip(test_samples, conds):
                rng = np.random.default_rng(derive_seed(cfg.seed, "perturb", s.id))
                noisy = perturb_layout(s.layout, cfg.eval.refine_sigma, rng)
                generated.append(refine(noisy, model, cond, cfg.sampler, sched))
        else:
            seeds = [derive_seed(cfg.seed, "sample", task_str, s.id) for s in test_samples]
            generated = ddim_sample_batch(model, conds, cfg.sampler, sched, seeds)
        rows, per_sample = [], []
        for s, cond, layout in zip(test_samples, conds, generated):
            rel = cond.relations if not cond.relations.is_empty() else None
            m = sample_metrics(layout, s.canvas, rel,
                               text_category=cfg.data.text_category,
                               underlay_category=cfg.data.underlay_category,
                               margin_alpha=cfg.eval.margin_alpha)
            per_sample.append(m)
            rows.append({"task": task_str, "sample_id": s.id, **m})
        fid = frechet_distance(extractor.features(generated), ref_features)
        report = aggregate_metrics(per_sample, fid=fid)
        results[task_str] = (report, rows)
    return results


CSV_FIELDS = ("task", "sample_id", "occ", "rea", "und_loose", "und_strict", "ove", "vio")


def write_reports(results: dict[str, tuple[MetricReport, list[dict]]], out_dir: Path) -> list[Path]:
    """One JSON report per task plus a combined per-sample CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for task_str, (report, _) in results.items():
        path = out_dir / f"report_{task_str.replace('+', '_')}.json"
        path.write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
        written.append(path)
    csv_path = out_dir / "samples.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for task_str in results:
            for row in results[task_str][1]:
                writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in CSV_FIELDS})
    written.append(csv_path)
    return written


def save_pretrained(path: Path, model: DualBranchDenoiser, curve: list[dict]) -> None:
    tail = curve[-1] if curve else {}
    save_checkpoint(path, model, extra={"stage": "pretrain", "final_loss": tail})
