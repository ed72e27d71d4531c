"""Command-line entry points: synth, train, finetune, sample, eval.

Every command reads one YAML run config, snapshots it into its output
directory, and is deterministic given the config and seed. Exit codes:
0 success, 2 usage/config error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .config import RunConfig, load_config, save_config
from .core import (Canvas, ConditionBundle, HybridTask, Layout, LayoutElement,
                   RelationMatrix, TaskKind, build_input_mask, relations_from_user)
from .data import extract_saliency_boxes, load_dataset, make_dataset, validate_sample, write_dataset
from .denoiser import build_model, load_checkpoint
from .diffusion import ddim_sample, make_schedule, refine
from .errors import ConfigError, LayoutError, NumericalError
from .training import (evaluate, finetune, load_model, pretrain, save_finetuned,
                       save_pretrained, write_reports)

# Fixed rendering palette per category index (logo, text, underlay,
# embellishment, then extras), chosen for visual regression stability.
PALETTE = [(66, 133, 244), (52, 168, 83), (255, 152, 0), (171, 71, 188),
           (0, 172, 193), (244, 67, 54)]


def render_layout(canvas: Canvas, layout: Layout) -> Image.Image:
    """Overlay category-colored boxes on the canvas; underlays draw first."""
    base = Image.fromarray((canvas.image * 255.0).round().astype(np.uint8), "RGB").convert("RGBA")
    overlay = Image.new("RGBA", base.size, (0, 0, 0, 0))
    draw = ImageDraw.Draw(overlay)
    w, h = base.size
    elements = sorted(layout.elements(), key=lambda el: el.box[2] * el.box[3], reverse=True)
    for el in elements:
        cx, cy, bw, bh = el.box
        x1, y1 = int((cx - bw / 2) * w), int((cy - bh / 2) * h)
        x2, y2 = int((cx + bw / 2) * w), int((cy + bh / 2) * h)
        color = PALETTE[el.category % len(PALETTE)]
        draw.rectangle([x1, y1, max(x1, x2 - 1), max(y1, y2 - 1)],
                       fill=color + (90,), outline=color + (255,), width=1)
    return Image.alpha_composite(base, overlay).convert("RGB")


def _setup(args) -> RunConfig:
    cfg = load_config(args.config)
    torch.set_num_threads(max(1, cfg.threads))
    return cfg


def _prepare_out(cfg: RunConfig) -> Path:
    out = cfg.resolved_out_dir()
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    return out


def _load_splits(cfg: RunConfig, data_dir: str | None) -> dict:
    source = data_dir or (cfg.data.source if cfg.data.source != "synthetic" else None)
    if source is None:
        return make_dataset(cfg.data)
    return {split: load_dataset(Path(source), split, cfg.data.n_max, cfg.data.saliency_threshold)
            for split in ("train", "val", "test")}


def _jsonl_logger(path: Path):
    fh = open(path, "w")

    def log(entry: dict):
        fh.write(json.dumps(entry, sort_keys=True) + "\n")
        fh.flush()

    return log, fh


def cmd_synth(args) -> int:
    cfg = _setup(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"{out} exists and is not empty; pass --force to overwrite")
    splits = make_dataset(cfg.data)
    for samples in splits.values():
        for s in samples:
            validate_sample(s, cfg.data.n_categories)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(splits, out)
    save_config(cfg, out / "config.yaml")
    sizes = {k: len(v) for k, v in splits.items()}
    print(f"wrote synthetic dataset to {out}: {sizes}")
    return 0


def cmd_train(args) -> int:
    cfg = _setup(args)
    out = _prepare_out(cfg)
    splits = _load_splits(cfg, args.data)
    model = build_model(cfg.model, cfg.seed)
    sched = make_schedule(cfg.schedule.steps, cfg.schedule.beta_start, cfg.schedule.beta_end)
    log, fh = _jsonl_logger(out / "pretrain_log.jsonl")
    try:
        curve = pretrain(model, splits["train"], cfg.pretrain, sched,
                         cfg.data.underlay_category, log)
    finally:
        fh.close()
    ckpt = out / "pretrain.pt"
    save_pretrained(ckpt, model, curve)
    print(f"pretrain done: {len(curve)} steps, final diff loss {curve[-1]['diff']:.4f}, saved {ckpt}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _setup(args)
    out = _prepare_out(cfg)
    splits = _load_splits(cfg, args.data)
    model, _ = load_checkpoint(args.base)
    sched = make_schedule(cfg.schedule.steps, cfg.schedule.beta_start, cfg.schedule.beta_end)
    log, fh = _jsonl_logger(out / "finetune_log.jsonl")
    try:
        curve = finetune(model, splits["train"], cfg.finetune, sched,
                         cfg.data.underlay_category, log)
    finally:
        fh.close()
    ckpt = out / "finetune.pt"
    base = Path(args.base)
    base_ref = base.name if base.parent.resolve() == out.resolve() else str(base.resolve())
    save_finetuned(ckpt, model, base_ref)
    print(f"finetune done: {len(curve)} steps, final total loss {curve[-1]['total']:.4f}, saved {ckpt}")
    return 0


def cmd_eval(args) -> int:
    cfg = _setup(args)
    out = _prepare_out(cfg)
    splits = _load_splits(cfg, args.data)
    model = load_model(args.checkpoint)
    sched = make_schedule(cfg.schedule.steps, cfg.schedule.beta_start, cfg.schedule.beta_end)
    tasks = args.tasks.split(",") if args.tasks else None
    results = evaluate(model, splits["test"], cfg, sched, tasks)
    eval_dir = out / f"eval_{Path(args.checkpoint).stem}"
    write_reports(results, eval_dir)
    for task, (report, _) in results.items():
        shown = {k: (round(v, 4) if isinstance(v, float) else v)
                 for k, v in report.to_dict().items() if k != "counts" and v is not None}
        print(f"{task}: {shown}")
    print(f"reports written to {eval_dir}")
    return 0


def _load_partial_layout(path: str | None, n_max: int) -> Layout:
    if path is None:
        return Layout.empty(n_max)
    record = json.loads(Path(path).read_text())
    elements = [LayoutElement(int(e["category"]), tuple(e["box"]))
                for e in record.get("elements", [])]
    return Layout.from_elements(elements, n_max)


def _sample_condition(cfg: RunConfig, args, canvas: Canvas):
    """Build the conditioning bundle for cmd_sample from user inputs."""
    parts = [TaskKind(p) for p in args.task.split("+")]
    needs_layout = {TaskKind.C_TO_SP, TaskKind.CS_TO_P, TaskKind.COMPLETION, TaskKind.REFINEMENT}
    if any(p in needs_layout for p in parts) and args.layout is None:
        raise ConfigError(f"task {args.task} requires --layout (partial layout JSON)")
    if TaskKind.RELATIONSHIP in parts and args.relations is None:
        raise ConfigError(f"task {args.task} requires --relations (relation list JSON)")
    n_max, n_cat = cfg.model.n_slots, cfg.model.n_categories
    provided = _load_partial_layout(args.layout, n_max)
    mask_np = None
    for part in parts:
        m = build_input_mask(part, provided, n_cat)
        mask_np = m if mask_np is None else type(m)(
            np.maximum(mask_np.mask, m.mask), np.where(m.mask > 0, m.known_values, mask_np.known_values))
    relations = RelationMatrix.zeros(n_max)
    if args.relations is not None:
        entries = json.loads(Path(args.relations).read_text())
        relations = relations_from_user(entries, n_max)
    task = parts[0] if len(parts) == 1 else HybridTask(mask_np, relations)
    return ConditionBundle(canvas, mask_np, relations, task), provided, parts


def cmd_sample(args) -> int:
    cfg = _setup(args)
    out = _prepare_out(cfg)
    model = load_model(args.checkpoint)
    image = np.asarray(Image.open(args.canvas).convert("RGB"), dtype=np.float64) / 255.0
    saliency = np.asarray(Image.open(args.saliency).convert("L"), dtype=np.float64) / 255.0
    boxes = extract_saliency_boxes(saliency, cfg.data.saliency_threshold)
    canvas = Canvas(image=image, saliency=saliency, saliency_boxes=tuple(boxes))
    cond, provided, parts = _sample_condition(cfg, args, canvas)
    sched = make_schedule(cfg.schedule.steps, cfg.schedule.beta_start, cfg.schedule.beta_end)
    if parts == [TaskKind.REFINEMENT]:
        layout = refine(provided, model, cond, cfg.sampler, sched)
    else:
        layout = ddim_sample(model, cond, cfg.sampler, sched, args.seed)
    prefix = Path(args.out) if args.out else out / "samples" / f"{args.task.replace('+', '_')}_{args.seed}"
    prefix.parent.mkdir(parents=True, exist_ok=True)
    record = {
        "task": args.task,
        "seed": args.seed,
        "elements": [{"category": el.category, "box": list(el.box)} for el in layout.elements()],
    }
    json_path = prefix.with_suffix(".json")
    json_path.write_text(json.dumps(record, sort_keys=True, indent=2) + "\n")
    render_layout(canvas, layout).save(prefix.with_suffix(".png"))
    print(f"wrote {json_path} and {prefix.with_suffix('.png')}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="layoutgen",
                                     description="Content-aware layout generation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="dataset output directory")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run multi-task pre-training")
    p.add_argument("--config", required=True)
    p.add_argument("--data", help="dataset directory (default: synthesize in memory)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="LoRA fine-tuning on top of a base checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--base", required=True, help="pre-trained checkpoint path")
    p.add_argument("--data", help="dataset directory (default: synthesize in memory)")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("sample", help="generate one layout for a canvas")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", required=True,
                   help="uncond | c_to_sp | cs_to_p | completion | refinement | relationship, "
                        "or a '+' combination such as completion+relationship")
    p.add_argument("--canvas", required=True, help="canvas PNG")
    p.add_argument("--saliency", required=True, help="saliency PNG")
    p.add_argument("--layout", help="partial layout JSON (task dependent)")
    p.add_argument("--relations", help="relation list JSON")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", help="output path prefix (writes .json and .png)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory (default: synthesize in memory)")
    p.add_argument("--tasks", help="comma-separated task list override")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, LayoutError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
