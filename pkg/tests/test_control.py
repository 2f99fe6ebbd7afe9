import numpy as np
import pytest

from stylecodes import control as ctrl
from stylecodes import numerics as nx
from stylecodes import style as sm
from stylecodes import unet
from stylecodes.errors import DimensionError
from stylecodes.numerics import Tensor

import toy

CFG = unet.BaseUNetConfig()


def _taps(B=2, seed=0):
    r = np.random.default_rng(seed)
    return [Tensor(r.standard_normal((B,) + s).astype(np.float32)) for s in CFG.tap_shapes()]


def _seed_and_temb(B=2, seed=1):
    r = np.random.default_rng(seed)
    return (Tensor(r.standard_normal((B,) + CFG.mid_shape).astype(np.float32)),
            Tensor(r.standard_normal((B, CFG.temb_dim)).astype(np.float32)))


def test_fresh_residuals_exactly_zero():
    p = ctrl.init_control(CFG, 0)
    s, e = _seed_and_temb()
    with nx.no_grad():
        res = ctrl.control_forward(s, _taps(), e, p, CFG)
    assert [tuple(r.shape[1:]) for r in res] == CFG.tap_shapes()
    assert all(not r.data.any() for r in res)


def test_residuals_consume_taps_in_order():
    p = ctrl.init_control(CFG, 0, sigma=0.1, zero_out=False)
    s, e = _seed_and_temb()
    taps = _taps()
    taps2 = list(taps)
    taps2[-1] = Tensor(taps[-1].data + 1.0)
    with nx.no_grad():
        a = ctrl.control_forward(s, taps, e, p, CFG)
        b = ctrl.control_forward(s, taps2, e, p, CFG)
        a2 = ctrl.control_forward(s, taps, e, p, CFG)
    for i in range(3):
        assert a[i].data.tobytes() == b[i].data.tobytes()
    assert not np.array_equal(a[3].data, b[3].data)
    assert all(x.data.tobytes() == y.data.tobytes() for x, y in zip(a, a2))


def test_tap_shape_checked():
    p = ctrl.init_control(CFG, 0)
    s, e = _seed_and_temb()
    with pytest.raises(DimensionError):
        ctrl.control_forward(s, _taps()[:3], e, p, CFG)


def test_conditioned_denoise_transparent_at_init_and_for_null():
    base = toy.randomize(unet.init_base(toy.CFG, 0, np.float64), 1)
    style = sm.init_style(toy.CFG.mid_shape, toy.SCFG, 0, 1e-4, np.float64)
    control = ctrl.init_control(toy.CFG, 0, 1e-4, np.float64)
    _, z, _, t, pr = toy.toy_batch()
    c = np.random.default_rng(0).uniform(-1, 1, (3, 20))
    with nx.no_grad():
        plain, _ = unet.forward_with_taps(base, toy.CFG, z, t, pr)
        cond = ctrl.conditioned_denoise(z, t, pr, c, base, control, style, toy.CFG, toy.SCFG)
        null = ctrl.conditioned_denoise(z, t, pr, None, base, control, style, toy.CFG, toy.SCFG)
    assert plain.data.tobytes() == cond.data.tobytes() == null.data.tobytes()


def test_style_off_mask_matches_base():
    base, style, control = toy.toy_parts()
    _, z, _, t, pr = toy.toy_batch()
    c = np.random.default_rng(0).uniform(-1, 1, (3, 20))
    on = np.array([True, False, True])
    with nx.no_grad():
        plain, _ = unet.forward_with_taps(base, toy.CFG, z, t, pr)
        cond = ctrl.conditioned_denoise(z, t, pr, c, base, control, style, toy.CFG, toy.SCFG, on)
    assert cond.data[1].tobytes() == plain.data[1].tobytes()
    assert not np.array_equal(cond.data[0], plain.data[0])


def test_joint_loss_gradients_match_finite_differences():
    base, style, control = toy.toy_parts()
    f = toy.joint_loss_fn(unet.freeze(base), style, control, toy.toy_batch())
    params = list(style.values()) + list(control.values())
    assert nx.grad_check(f, params, max_coords=6) < 1e-4


def test_frozen_base_gets_no_update_but_control_gets_gradient():
    base, style, control = toy.toy_parts()
    frozen = unet.freeze(base)
    h = frozen.sha256()
    opt = nx.Adam({**style, **control}, lr=1e-2)
    f = toy.joint_loss_fn(frozen, style, control, toy.toy_batch())
    for _ in range(3):
        opt.zero_grad()
        nx.backward(f())
        opt.step()
    assert np.abs(control["control.in0.w"].grad).max() > 0
    assert all(p.grad is None for p in frozen.values())
    assert frozen.sha256() == h
