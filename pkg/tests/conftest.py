import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from p2u.model_store import TensorModel

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "repo",
    deadline=None,
    derandomize=True,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("repo")

names = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789._", min_size=1, max_size=12)
shapes = st.lists(st.integers(1, 6), min_size=1, max_size=3).map(tuple)


@st.composite
def tensor_models(draw, max_tensors=4):
    tnames = draw(st.lists(names, min_size=0, max_size=max_tensors, unique=True))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    arrays = []
    for n in tnames:
        shape = draw(shapes)
        scale = draw(st.sampled_from([1e-3, 1.0, 50.0]))
        arrays.append((n, rng.normal(0.0, scale, size=shape)))
    return TensorModel.from_arrays(draw(names), arrays)


def gaussian_model(seed, sizes=((64, 32), (32,)), scale=0.1, name="g"):
    rng = np.random.default_rng(seed)
    return TensorModel.from_arrays(name, [(f"t{i}", rng.normal(0.0, scale, size=s)) for i, s in enumerate(sizes)])


@pytest.fixture
def small_model():
    return gaussian_model(0)
