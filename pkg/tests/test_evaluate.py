import numpy as np
import pytest

from stylecodes import datagen, diffusion, trainer, unet
from stylecodes.cli import validate_metrics
from stylecodes.errors import ConfigError
from stylecodes.evaluate import eval_style_transfer, retrieval, style_centroids
from stylecodes.model import StylecodesModel
from stylecodes.style import PatchEmbedder


@pytest.fixture(scope="module")
def eval_data():
    return datagen.build_dataset(9, 2, seed=5)


@pytest.fixture(scope="module")
def fresh_model():
    m = StylecodesModel(unet.BaseUNetConfig(), trainer.desk_schedule(200), unet.init_base(seed=0))
    m.init_style_modules(0)
    return m


def test_retrieval_perfect_features():
    cents = {i: np.eye(9)[i] for i in range(9)}
    feats = np.stack([cents[i % 9] for i in range(27)])
    correct, intra, inter = retrieval(feats, [i % 9 for i in range(27)], cents, 7, 0)
    assert correct.all() and not intra.any() and np.all(inter > 0)


def test_retrieval_needs_enough_styles():
    cents = {i: np.zeros(2) for i in range(4)}
    with pytest.raises(ConfigError):
        retrieval(np.zeros((1, 2)), [0], cents, 7, 0)


def test_oracle_is_perfect(eval_data, fresh_model):
    m = eval_style_transfer(fresh_model, eval_data, n_per_style=6, k_distractors=7, oracle=True)
    assert m["accuracy"] == 1.0
    assert m["ratio"] < 1
    validate_metrics(m)


def test_untrained_model_is_at_chance(eval_data, fresh_model):
    sampler = diffusion.SamplerConfig("ddim", 2)
    m = eval_style_transfer(fresh_model, eval_data, n_per_style=40, k_distractors=7, sampler=sampler)
    assert abs(m["accuracy"] - 0.125) <= 0.15
    assert len(set(r["code"] for r in m["per_style"])) >= 1
    validate_metrics(m)


def test_centroids_use_every_render(eval_data):
    cents = style_centroids(eval_data, PatchEmbedder())
    assert sorted(cents) == eval_data.style_ids
    assert all(v.shape == (64,) for v in cents.values())
