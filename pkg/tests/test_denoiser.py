import numpy as np
import pytest
import torch

from layoutgen.core import (ConditionBundle, PartialConstraintMask, RelationMatrix,
                            TaskKind, build_task_mask, extract_relations,
                            sample_relation_subset)
from layoutgen.data import synth_canvas, synth_layout
from layoutgen.denoiser import (DualBranchDenoiser, ImageEncoder, ModelConfig,
                                RelationBias, build_model, collate_conditions,
                                load_checkpoint, mm_attention, model_preset,
                                save_checkpoint, sinusoidal_embedding)
from layoutgen.diffusion import make_schedule, q_sample
from layoutgen.errors import ConfigError
from layoutgen.losses import diffusion_loss

from conftest import random_layout

DESK = model_preset("desk")


@pytest.fixture(scope="module")
def model():
    return build_model(DESK, seed=1)


@pytest.fixture(scope="module")
def cond():
    rng = np.random.default_rng(0)
    canvas = synth_canvas(rng, DESK.image_h, DESK.image_w, 2)
    layout = synth_layout(canvas, rng, 3, DESK.n_slots)
    mask = build_task_mask(TaskKind.C_TO_SP, layout, DESK.n_categories, rng)
    rel = sample_relation_subset(extract_relations(layout), 0.5, rng)
    return ConditionBundle(canvas, mask, rel, TaskKind.RELATIONSHIP)


def randomize_weights(model: DualBranchDenoiser, seed: int = 99, scale: float = 0.05):
    """Perturb every parameter so adaLN gates become active."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_shared=65, heads=2)
    with pytest.raises(ConfigError):
        ModelConfig(image_h=100, patch=32)
    with pytest.raises(ConfigError):
        ModelConfig(bias_sites="everywhere")


def test_paper_preset_token_count():
    paper = model_preset("paper")
    assert paper.n_image_tokens == (384 // 32) * (256 // 32) == 96
    assert DESK.n_image_tokens == 24


def test_image_encoder_zero_canvas_determinism():
    enc = ImageEncoder(DESK).to(torch.float64)
    z1 = enc(torch.zeros(1, 4, DESK.image_h, DESK.image_w, dtype=torch.float64))
    z2 = enc(torch.zeros(1, 4, DESK.image_h, DESK.image_w, dtype=torch.float64))
    torch.testing.assert_close(z1, z2, rtol=0, atol=0)
    assert z1.shape == (1, DESK.n_image_tokens, DESK.d_image)


def test_image_encoder_channel_order_matters():
    enc = ImageEncoder(DESK).to(torch.float64)
    gen = torch.Generator().manual_seed(3)
    img = torch.rand(1, 4, DESK.image_h, DESK.image_w, generator=gen, dtype=torch.float64)
    swapped = img[:, [3, 0, 1, 2]]  # saliency first instead of last
    assert not torch.allclose(enc(img), enc(swapped))


def test_layout_tokens_ignore_zero_canvas_codes(model, cond):
    rb = model.relbias
    zeros = torch.zeros(1, DESK.n_slots, 2, dtype=torch.long)
    assert torch.all(rb.canvas_embedding(zeros) == 0)


def test_layout_tokens_slot_symmetric(model):
    x = torch.zeros(1, DESK.n_slots, DESK.state_dim, dtype=torch.float64)
    x[0, 0] = x[0, 3] = torch.tensor([-1., 1., -1., 0., 0., -.6, -.8], dtype=torch.float64)
    tokens = model.enc["layout"](x)
    torch.testing.assert_close(tokens[0, 0], tokens[0, 3], rtol=0, atol=0)
    assert tokens.shape == (1, DESK.n_slots, DESK.d_layout)


def test_mask_tokens_shape_and_zero_input(model):
    zeros = torch.zeros(1, DESK.n_slots, DESK.state_dim, dtype=torch.float64)
    tokens = model.enc["mask"](zeros, zeros)
    assert tokens.shape == (1, DESK.n_slots, DESK.d_mask)
    # all-zero mask rows share one embedding
    assert torch.all(tokens[0] == tokens[0, 0])


def test_mask_tokens_differ_across_tasks(model, cond):
    rng = np.random.default_rng(1)
    canvas = cond.canvas
    layout = synth_layout(canvas, np.random.default_rng(2), 3, DESK.n_slots)
    m1 = build_task_mask(TaskKind.C_TO_SP, layout, 3, rng)
    m2 = build_task_mask(TaskKind.CS_TO_P, layout, 3, rng)
    to_t = lambda m: (torch.from_numpy(np.array(m.mask)), torch.from_numpy(np.array(m.known_values)))
    t1 = model.enc["mask"](*to_t(m1))
    t2 = model.enc["mask"](*to_t(m2))
    assert not torch.allclose(t1, t2)


def test_sinusoidal_zero_phase():
    emb = sinusoidal_embedding(torch.zeros(1, dtype=torch.float64), 8)
    np.testing.assert_allclose(emb.numpy(), [[0, 0, 0, 0, 1, 1, 1, 1]])


def test_condition_vector_injective_over_timesteps(model, cond):
    batch = collate_conditions([cond], DESK, torch.float64)
    f_image = model.enc["image"](batch["images"])
    embs = []
    for t in range(1, 1001, 1):
        embs.append(model.cond(torch.tensor([t]), batch["boxes"], f_image))
    stacked = torch.cat(embs)
    unique = torch.unique(stacked, dim=0)
    assert unique.shape[0] == stacked.shape[0]


def test_condition_vector_empty_boxes_equals_zero_padding(model, cond):
    no_boxes = ConditionBundle(
        canvas=type(cond.canvas)(cond.canvas.image, cond.canvas.saliency, ()),
        mask=cond.mask, relations=cond.relations, task=cond.task)
    b1 = collate_conditions([no_boxes], DESK, torch.float64)
    assert torch.all(b1["boxes"] == 0)


def test_mm_attention_single_token_returns_own_value():
    q = torch.randn(1, 1, 8, dtype=torch.float64)
    k = torch.randn(1, 1, 8, dtype=torch.float64)
    v = torch.randn(1, 1, 8, dtype=torch.float64)
    out = mm_attention([(q, k, v)], heads=2)
    torch.testing.assert_close(out[0], v, rtol=0, atol=1e-12)


def test_mm_attention_rows_sum_to_one_via_constant_values():
    gen = torch.Generator().manual_seed(4)
    q = torch.randn(2, 5, 8, generator=gen, dtype=torch.float64)
    k = torch.randn(2, 5, 8, generator=gen, dtype=torch.float64)
    c = torch.randn(1, 1, 8, generator=gen, dtype=torch.float64)
    v = c.expand(2, 5, 8).contiguous()
    out = mm_attention([(q, k, v)], heads=2)[0]
    torch.testing.assert_close(out, v, rtol=0, atol=1e-6)


def test_mm_attention_single_group_is_self_attention():
    gen = torch.Generator().manual_seed(5)
    q = torch.randn(1, 4, 4, generator=gen, dtype=torch.float64)
    k = torch.randn(1, 4, 4, generator=gen, dtype=torch.float64)
    v = torch.randn(1, 4, 4, generator=gen, dtype=torch.float64)
    out = mm_attention([(q, k, v)], heads=1)[0]
    logits = q @ k.transpose(-1, -2) / 2.0
    expected = torch.softmax(logits, dim=-1) @ v
    torch.testing.assert_close(out, expected, rtol=1e-12, atol=1e-12)


def test_mm_attention_splits_groups():
    gen = torch.Generator().manual_seed(6)
    g1 = tuple(torch.randn(1, 3, 8, generator=gen, dtype=torch.float64) for _ in range(3))
    g2 = tuple(torch.randn(1, 5, 8, generator=gen, dtype=torch.float64) for _ in range(3))
    o1, o2 = mm_attention([g1, g2], heads=2)
    assert o1.shape == (1, 3, 8) and o2.shape == (1, 5, 8)


def test_relation_bias_zero_codes_give_zero():
    local = build_model(DESK, seed=1)
    randomize_weights(local, seed=7)  # nonzero tables
    rb = local.relbias
    codes = torch.zeros(1, 4, 4, 2, dtype=torch.long)
    assert torch.all(rb.intra_bias(codes) == 0)
    bias = rb.attention_bias(codes, (4, 4))
    assert torch.all(bias == 0)


def test_relation_bias_cross_modal_always_zero():
    cfg = model_preset("desk")
    rb = RelationBias(cfg).to(torch.float64)
    with torch.no_grad():
        for p in rb.parameters():
            p.fill_(3.3)
    codes = torch.randint(0, 4, (2, cfg.n_slots, cfg.n_slots, 2))
    bias = rb.attention_bias(codes, (cfg.n_slots, cfg.n_slots))
    n = cfg.n_slots
    assert torch.all(bias[:, :, :n, n:] == 0)
    assert torch.all(bias[:, :, n:, :n] == 0)


def test_relation_bias_perturbation_touches_only_intra_blocks():
    cfg = model_preset("desk")
    rb = RelationBias(cfg).to(torch.float64)
    codes = torch.randint(0, 4, (1, cfg.n_slots, cfg.n_slots, 2))
    before = rb.attention_bias(codes, (cfg.n_slots, cfg.n_slots))
    with torch.no_grad():
        rb.emb_size.table.add_(1.0)
        rb.emb_pos.table.add_(0.5)
    after = rb.attention_bias(codes, (cfg.n_slots, cfg.n_slots))
    diff = (after - before).abs().detach()
    n = cfg.n_slots
    assert float(diff[:, :, :n, n:].max()) == 0.0
    assert float(diff[:, :, n:, :n].max()) == 0.0
    assert float(diff[:, :, :n, :n].max()) > 0.0


def test_relation_bias_rejects_unknown_code(model):
    codes = torch.full((1, 4, 4, 2), 9, dtype=torch.long)
    with pytest.raises(ConfigError):
        model.relbias.intra_bias(codes)


def test_forward_shape_and_finiteness(model, cond):
    x = torch.randn(2, DESK.n_slots, DESK.state_dim, dtype=torch.float64)
    out = model(x, torch.tensor([1, 500]), [cond, cond])
    assert out.shape == x.shape
    assert torch.isfinite(out).all()


def test_forward_at_init_equals_head_of_summed_embeddings(model, cond):
    x = torch.randn(1, DESK.n_slots, DESK.state_dim, dtype=torch.float64)
    t = torch.tensor([7])
    batch = collate_conditions([cond], DESK, torch.float64)
    f_image = model.enc["image"](batch["images"])
    f_layout = model.enc["layout"](x) + model.relbias.canvas_embedding(batch["canvas_codes"])
    f_mask = model.enc["mask"](batch["mask"], batch["known"])
    f_cond = model.cond(t, batch["boxes"], f_image)
    a = model.branchA.in_layout(f_layout)
    b = model.branchB.in_layout(f_layout)
    expected = model.head(a + b, f_cond)
    torch.testing.assert_close(model(x, t, [cond]), expected, rtol=0, atol=1e-12)
    assert f_mask.shape == (1, DESK.n_slots, DESK.d_mask)


def test_forward_depth_independent_at_init(cond):
    x = torch.randn(1, DESK.n_slots, DESK.state_dim, dtype=torch.float64)
    t = torch.tensor([42])
    out1 = build_model(model_preset("desk", depth=1), seed=1)(x, t, [cond])
    out4 = build_model(model_preset("desk", depth=4), seed=1)(x, t, [cond])
    torch.testing.assert_close(out1, out4, rtol=0, atol=0)


def permute_condition(cond: ConditionBundle, perm: np.ndarray) -> ConditionBundle:
    mask = PartialConstraintMask(cond.mask.mask[perm], cond.mask.known_values[perm])
    full = np.concatenate([[0], perm + 1])
    rel = RelationMatrix(cond.relations.rel[np.ix_(full, full)])
    return ConditionBundle(cond.canvas, mask, rel, cond.task)


def test_forward_permutation_equivariance(cond):
    model = build_model(DESK, seed=1)
    randomize_weights(model, seed=8)
    rng = np.random.default_rng(9)
    x = torch.randn(1, DESK.n_slots, DESK.state_dim, dtype=torch.float64, generator=torch.Generator().manual_seed(10))
    t = torch.tensor([321])
    perm = rng.permutation(DESK.n_slots)
    out = model(x, t, [cond])
    out_perm = model(x[:, perm], t, [permute_condition(cond, perm)])
    torch.testing.assert_close(out_perm, out[:, perm], rtol=0, atol=1e-5)


def test_diffusion_loss_gradients_match_finite_differences(cond):
    model = build_model(model_preset("desk", depth=1, vit_depth=1), seed=2)
    randomize_weights(model, seed=11, scale=0.02)
    sched = make_schedule(50)
    rng = np.random.default_rng(12)
    layout = random_layout(rng, n_max=DESK.n_slots)
    from layoutgen.core import encode_layout
    x0 = torch.from_numpy(encode_layout(layout, 3, DESK.n_slots)).unsqueeze(0)
    eps = torch.from_numpy(rng.standard_normal(x0.shape))
    x_t = q_sample(x0, 17, eps, sched)
    valid = torch.from_numpy(np.array(layout.valid)).unsqueeze(0)

    def loss_value():
        out = model(x_t, torch.tensor([17]), [cond])
        return diffusion_loss(out, eps, valid)

    loss = loss_value()
    params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)
    picked = np.random.default_rng(13).choice(len(params), size=6, replace=False)
    for idx in picked:
        name, p = params[idx]
        g = grads[idx]
        flat = int(np.random.default_rng(idx).integers(p.numel()))
        h = 1e-6
        with torch.no_grad():
            orig = p.view(-1)[flat].item()
            p.view(-1)[flat] = orig + h
            up = float(loss_value())
            p.view(-1)[flat] = orig - h
            down = float(loss_value())
            p.view(-1)[flat] = orig
        fd = (up - down) / (2 * h)
        analytic = 0.0 if g is None else float(g.view(-1)[flat])
        denom = max(abs(fd), abs(analytic), 1e-8)
        assert abs(fd - analytic) / denom < 1e-3, f"{name}[{flat}]: fd={fd}, autograd={analytic}"


def test_checkpoint_roundtrip(tmp_path, model, cond):
    x = torch.randn(1, DESK.n_slots, DESK.state_dim, dtype=torch.float64)
    t = torch.tensor([5])
    before = model(x, t, [cond])
    path = tmp_path / "model.pt"
    save_checkpoint(path, model, extra={"stage": "test"})
    loaded, extra = load_checkpoint(path)
    assert extra["stage"] == "test"
    torch.testing.assert_close(loaded(x, t, [cond]), before, rtol=0, atol=0)


def test_checkpoint_names_follow_contract(model):
    names = [n for n, _ in model.named_parameters()]
    for prefix in ("enc.image.", "enc.layout.", "enc.mask.", "branchA.block.0.",
                   "branchB.block.0.", "relbias.", "head."):
        assert any(n.startswith(prefix) for n in names), prefix
