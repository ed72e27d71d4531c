import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from layoutgen.core import Layout, LayoutElement

settings.register_profile(
    "suite", max_examples=25, deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_layout(rng: np.random.Generator, n_max: int = 8, n_categories: int = 3,
                  n_valid: int | None = None) -> Layout:
    """Random valid layout with boxes fully inside the canvas."""
    if n_valid is None:
        n_valid = int(rng.integers(1, n_max + 1))
    elements = []
    for _ in range(n_valid):
        w = float(rng.uniform(0.05, 0.5))
        h = float(rng.uniform(0.05, 0.5))
        cx = float(rng.uniform(w / 2, 1 - w / 2))
        cy = float(rng.uniform(h / 2, 1 - h / 2))
        elements.append(LayoutElement(int(rng.integers(0, n_categories)), (cx, cy, w, h)))
    return Layout.from_elements(elements, n_max)


@pytest.fixture
def layout_factory():
    return random_layout
