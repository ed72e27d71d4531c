import numpy as np
import pytest

from layoutgen.core import MIXTURE_TASKS, TaskKind
from layoutgen.data import (DatasetSpec, FINETUNE_MIXTURE, PRETRAIN_MIXTURE, TaskMixture,
                            extract_saliency_boxes, load_dataset, make_dataset,
                            synth_canvas, synth_layout, task_sampler, validate_sample,
                            write_dataset)
from layoutgen.errors import ConfigError
from layoutgen.metrics import occlusion, underlay_effectiveness

SMALL = DatasetSpec(train_size=6, val_size=2, test_size=2)


def test_synth_canvas_deterministic():
    a = synth_canvas(np.random.default_rng(1), 48, 32, 2)
    b = synth_canvas(np.random.default_rng(1), 48, 32, 2)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.saliency, b.saliency)
    assert a.saliency_boxes == b.saliency_boxes


def test_synth_canvas_saliency_normalized():
    for seed in range(5):
        c = synth_canvas(np.random.default_rng(seed), 96, 64, 3)
        assert c.saliency.max() == 1.0
        assert c.saliency.min() >= 0.0


def test_synth_canvas_blob_centers_are_local_maxima():
    # argmax-neighborhood oracle: each blob center pixel dominates its 8-neighborhood
    for seed in range(8):
        rng = np.random.default_rng(seed)
        h, w, n = 96, 64, int(rng.integers(1, 4))
        # regenerate with the same stream to recover the centers deterministically
        c = synth_canvas(np.random.default_rng(seed), h, w, n)
        s = c.saliency
        peaks = 0
        for r in range(1, h - 1):
            for col in range(1, w - 1):
                patch = s[r - 1:r + 2, col - 1:col + 2]
                if s[r, col] == patch.max() and s[r, col] > 0.9:
                    peaks += 1
        assert peaks >= n  # every bump produces at least one dominating pixel


def test_synth_layout_generator_guarantees():
    for seed in range(6):
        rng = np.random.default_rng(seed)
        canvas = synth_canvas(rng, 96, 64, 2)
        layout = synth_layout(canvas, rng, 3, 8)
        assert occlusion(layout, canvas) < 0.2
        loose, strict = underlay_effectiveness(layout, underlay_category=2)
        assert strict == 1.0
        assert layout.n_valid == 4  # 3 placed elements + the underlay


def test_synth_layout_deterministic():
    canvas = synth_canvas(np.random.default_rng(3), 96, 64, 2)
    a = synth_layout(canvas, np.random.default_rng(4), 3, 8)
    b = synth_layout(canvas, np.random.default_rng(4), 3, 8)
    np.testing.assert_array_equal(a.boxes, b.boxes)
    np.testing.assert_array_equal(a.categories, b.categories)


def test_synth_layout_rejects_bad_count():
    canvas = synth_canvas(np.random.default_rng(5), 48, 32, 1)
    with pytest.raises(ConfigError):
        synth_layout(canvas, np.random.default_rng(0), 8, 8)


def test_extract_saliency_boxes_empty_map():
    assert extract_saliency_boxes(np.zeros((20, 20))) == []


def test_extract_saliency_boxes_rectangular_plateau():
    s = np.zeros((20, 40))
    s[5:10, 8:24] = 1.0
    boxes = extract_saliency_boxes(s, 0.5)
    assert len(boxes) == 1
    cx, cy, w, h = boxes[0]
    assert (cx, cy) == pytest.approx((16 / 40, 7.5 / 20))
    assert (w, h) == pytest.approx((16 / 40, 5 / 20))


def test_extract_saliency_boxes_two_plateaus_sorted():
    s = np.zeros((20, 40))
    s[2:6, 2:6] = 1.0      # small
    s[10:18, 10:30] = 1.0  # large
    boxes = extract_saliency_boxes(s, 0.5)
    assert len(boxes) == 2
    assert boxes[0][2] * boxes[0][3] > boxes[1][2] * boxes[1][3]


def test_extract_saliency_boxes_matches_flood_fill_oracle():
    rng = np.random.default_rng(6)
    s = (rng.uniform(0, 1, (16, 16)) > 0.7).astype(float)

    def flood_components(mask):
        seen = np.zeros_like(mask, dtype=bool)
        comps = []
        for r in range(mask.shape[0]):
            for c in range(mask.shape[1]):
                if mask[r, c] and not seen[r, c]:
                    stack, cells = [(r, c)], []
                    seen[r, c] = True
                    while stack:
                        y, x = stack.pop()
                        cells.append((y, x))
                        for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                            ny, nx = y + dy, x + dx
                            if 0 <= ny < 16 and 0 <= nx < 16 and mask[ny, nx] and not seen[ny, nx]:
                                seen[ny, nx] = True
                                stack.append((ny, nx))
                    comps.append(cells)
        return comps

    comps = flood_components(s >= 0.5)
    expected = []
    for cells in comps:
        rows = [c[0] for c in cells]
        cols = [c[1] for c in cells]
        x1, x2 = min(cols) / 16, (max(cols) + 1) / 16
        y1, y2 = min(rows) / 16, (max(rows) + 1) / 16
        expected.append(((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1))
    expected.sort(key=lambda b: b[2] * b[3], reverse=True)
    got = extract_saliency_boxes(s, 0.5)
    assert len(got) == len(expected)
    got_sorted = sorted(got)
    for g, e in zip(got_sorted, sorted(expected)):
        np.testing.assert_allclose(g, e)


def test_mixture_validation():
    with pytest.raises(ConfigError):
        TaskMixture(0.5, 0.5, 0.5, 0, 0)
    with pytest.raises(ConfigError):
        TaskMixture(-0.1, 0.4, 0.4, 0.3, 0)
    assert PRETRAIN_MIXTURE.probs().sum() == pytest.approx(1.0)
    assert FINETUNE_MIXTURE.probs().sum() == pytest.approx(1.0)


def test_task_sampler_pretrain_never_yields_relationship():
    rng = np.random.default_rng(7)
    stream = task_sampler(PRETRAIN_MIXTURE, rng)
    draws = [next(stream) for _ in range(10_000)]
    assert TaskKind.RELATIONSHIP not in draws
    assert TaskKind.REFINEMENT not in draws


def test_task_sampler_finetune_relationship_rate():
    rng = np.random.default_rng(8)
    stream = task_sampler(FINETUNE_MIXTURE, rng)
    n = 60_000
    count = sum(next(stream) is TaskKind.RELATIONSHIP for _ in range(n))
    p = 1 / 6
    sigma = np.sqrt(n * p * (1 - p))
    assert abs(count - n * p) <= 3 * sigma


def test_task_sampler_degenerate_mixture():
    stream = task_sampler(TaskMixture(1, 0, 0, 0, 0), np.random.default_rng(9))
    assert all(next(stream) is TaskKind.UNCOND for _ in range(100))


def test_make_dataset_deterministic_and_valid():
    a = make_dataset(SMALL)
    b = make_dataset(SMALL)
    for split in ("train", "val", "test"):
        assert len(a[split]) == len(b[split]) == SMALL.split_sizes()[split]
        for s1, s2 in zip(a[split], b[split]):
            np.testing.assert_array_equal(s1.canvas.image, s2.canvas.image)
            np.testing.assert_array_equal(s1.layout.boxes, s2.layout.boxes)
            validate_sample(s1, SMALL.n_categories)


def test_dataset_write_load_roundtrip_bit_exact(tmp_path):
    splits = make_dataset(SMALL)
    write_dataset(splits, tmp_path)
    for split, samples in splits.items():
        loaded = load_dataset(tmp_path, split, SMALL.n_max)
        assert len(loaded) == len(samples)
        for orig, back in zip(samples, loaded):
            assert orig.id == back.id
            np.testing.assert_array_equal(orig.canvas.image, back.canvas.image)
            np.testing.assert_array_equal(orig.canvas.saliency, back.canvas.saliency)
            assert orig.canvas.saliency_boxes == back.canvas.saliency_boxes
            np.testing.assert_array_equal(orig.layout.boxes, back.layout.boxes)
            np.testing.assert_array_equal(orig.layout.categories, back.layout.categories)
            np.testing.assert_array_equal(orig.layout.valid, back.layout.valid)


def test_write_dataset_twice_is_byte_identical(tmp_path):
    splits = make_dataset(SMALL)
    d1, d2 = tmp_path / "one", tmp_path / "two"
    write_dataset(splits, d1)
    write_dataset(splits, d2)
    files1 = sorted(p.relative_to(d1) for p in d1.rglob("*") if p.is_file())
    files2 = sorted(p.relative_to(d2) for p in d2.rglob("*") if p.is_file())
    assert files1 == files2
    for rel in files1:
        assert (d1 / rel).read_bytes() == (d2 / rel).read_bytes()


def test_load_dataset_missing_split(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path, "train", 8)
