import numpy as np
import pytest

from stylecodes import codec
from stylecodes import numerics as nx
from stylecodes import style as sm
from stylecodes.errors import DimensionError, ValidationError
from stylecodes.numerics import Tensor

import toy

MID = (128, 8, 8)


def stripes(vertical=True, period=4):
    x = np.arange(32)
    row = np.where((x // (period // 2)) % 2 == 0, 0.8, -0.8)
    img = np.tile(row, (32, 1)) if vertical else np.tile(row[:, None], (1, 32))
    return np.broadcast_to(img, (3, 32, 32)).astype(np.float32)


def test_constant_image_has_zero_std():
    tok = sm.embed_image(np.zeros((3, 32, 32), np.float32))
    assert tok.shape == (64, sm.TOKEN_WIDTH)
    assert not tok[:, 3:6].any()


def test_embedding_deterministic():
    img = np.tanh(np.random.default_rng(0).standard_normal((3, 32, 32)))
    assert sm.embed_image(img).tobytes() == sm.embed_image(img.copy()).tobytes()


def test_vertical_stripes_have_more_horizontal_energy():
    ex = slice(12, 15)
    v = sm.embed_image(stripes(True))[:, ex].mean()
    h = sm.embed_image(stripes(False))[:, ex].mean()
    assert v > h


def test_embedder_validates_input():
    with pytest.raises(ValidationError):
        sm.embed_image(np.full((3, 32, 32), 2.0, np.float32))
    with pytest.raises(DimensionError):
        sm.embed_image(np.zeros((1, 32, 32), np.float32))


def _random_style(seed=0, sigma=0.3):
    return sm.init_style(MID, sm.StyleConfig(), seed, sigma)


def test_latent_in_open_interval_and_deterministic():
    p = _random_style(sigma=2.0)
    tok = np.random.default_rng(1).standard_normal((4, 64, 32)).astype(np.float32) * 50
    with nx.no_grad():
        a = sm.encode_style(tok, p).data
        b = sm.encode_style(tok, p).data
    assert a.shape == (4, 20)
    assert np.all(np.abs(a) <= 1.0)
    assert a.tobytes() == b.tobytes()


def test_latent_sensitive_to_random_projection_features():
    p = _random_style()
    img = np.tanh(np.random.default_rng(2).standard_normal((3, 32, 32))).astype(np.float32)
    tok = sm.embed_image(img)
    perm = tok.copy()
    perm[:, 22:] = tok[:, 22:][:, ::-1]
    with nx.no_grad():
        d = np.abs(sm.encode_style(tok, p).data - sm.encode_style(perm, p).data).max()
    assert d > 0


def test_decoder_shape_and_sensitivity():
    p = _random_style()
    c = np.zeros(20, np.float32)
    c2 = c.copy()
    c2[7] = 0.5
    with nx.no_grad():
        a = sm.decode_style(c, p, MID).data
        a2 = sm.decode_style(c, p, MID).data
        b = sm.decode_style(c2, p, MID).data
    assert a.shape == MID
    assert a.tobytes() == a2.tobytes()
    assert np.abs(a - b).max() > 0


def test_roundtrip_gradient_reaches_encoder():
    p = _random_style()
    for t in p.values():
        t.requires_grad = True
    img = np.tanh(np.random.default_rng(3).standard_normal((2, 3, 32, 32))).astype(np.float32)
    out = sm.roundtrip_train_path(img, p, MID)
    nx.backward(nx.mean(nx.square(out)))
    assert np.abs(p["styleenc.out.w"].grad).max() > 0
    assert np.abs(p["styleenc.layer0.q.w"].grad).max() > 0


def test_inference_path_differs_but_stays_close():
    p = _random_style()
    img = np.tanh(np.random.default_rng(4).standard_normal((3, 32, 32))).astype(np.float32)
    with nx.no_grad():
        c = sm.encode_style(sm.embed_image(img), p).data
        train = sm.roundtrip_train_path(img, p, MID).data
        infer = sm.decode_style(codec.roundtrip(c).astype(np.float32), p, MID).data
        assert np.all(np.abs(codec.roundtrip(c) - c) <= 1 / 64)
    assert np.all(np.isfinite(train))
    assert not np.array_equal(train, infer)


def test_roundtrip_identical_images():
    p = _random_style()
    img = np.tanh(np.random.default_rng(5).standard_normal((3, 32, 32))).astype(np.float32)
    with nx.no_grad():
        a = sm.roundtrip_train_path(img, p, MID).data
        b = sm.roundtrip_train_path(img.copy(), p, MID).data
    assert a.tobytes() == b.tobytes()


def test_roundtrip_path_gradients_match_finite_differences():
    p = sm.init_style(toy.CFG.mid_shape, toy.SCFG, 0, sigma=0.3, dtype=np.float64)
    img = np.tanh(np.random.default_rng(6).standard_normal((2, 3, 4, 4)))
    emb = sm.PatchEmbedder(toy.SCFG.patch)
    target = np.random.default_rng(7).standard_normal((2,) + toy.CFG.mid_shape)

    def f():
        return nx.mse(sm.roundtrip_train_path(img, p, toy.CFG.mid_shape, toy.SCFG, emb), target)

    assert nx.grad_check(f, list(p.values()), max_coords=8) < 1e-4


def test_norm_params_start_at_identity():
    p = _random_style()
    assert np.all(p["styleenc.layer0.ln1.g"].data == 1) and not p["styleenc.layer0.ln1.b"].data.any()


@pytest.mark.slow
def test_trained_encoder_groups_renders_by_style():
    """Same-style renders land closer in latent space than different-style ones."""
    from pathlib import Path

    from stylecodes import datagen
    from stylecodes.model import load_model

    desk = Path(__file__).resolve().parents[1] / "artifacts" / "desk"
    if not (desk / "joint.sckp").exists():
        pytest.skip("desk-scale joint checkpoint not built (artifacts/desk/run_joint.py)")
    model = load_model(desk / "joint.sckp", require_style=True)
    train, _ = datagen.split_from_manifest(datagen.load_dataset(desk / "dataset"))
    conds, _, _, sid = train.arrays()
    lat = model.encode_latent(conds)
    r = np.random.default_rng(0)
    hits = []
    for a in r.integers(len(sid), size=5000):
        same = np.flatnonzero(sid == sid[a])
        p = r.choice(same[same != a])
        n = r.choice(np.flatnonzero(sid != sid[a]))
        hits.append(np.linalg.norm(lat[a] - lat[p]) < np.linalg.norm(lat[a] - lat[n]))
    assert np.mean(hits) >= 0.9
