import numpy as np
import pytest

from vqforge.convexopt import ConvexConfig, SoftState, ratios
from vqforge.errors import ContractError, DivergenceError
from vqforge.incremental import (
    CalibConfig,
    CalibData,
    LayerwiseAdapter,
    calibrate,
    combine_losses,
    confirm_step,
    finalize_force_confirm,
    hard_indices,
    isotropic_inputs,
    loss_bkd,
    loss_reg,
    loss_task,
)
from vqforge.kmeans import make_rng
from vqforge.weightio import ModelBundle, WeightMatrix


def test_loss_task_examples(rng):
    y = rng.standard_normal((4, 3))
    l, g = loss_task(y.copy(), y)
    assert l == 0 and not g.any()
    assert loss_task(y + 1, y)[0] == pytest.approx(1.0)


def test_loss_task_gradient(rng):
    out, y = rng.standard_normal((2, 5, 3))
    _, g = loss_task(out, y)
    h = 1e-6
    for idx in np.ndindex(*out.shape):
        p = out.copy(); p[idx] += h
        m = out.copy(); m[idx] -= h
        fd = (loss_task(p, y)[0] - loss_task(m, y)[0]) / (2 * h)
        assert fd == pytest.approx(g[idx], abs=1e-5)


def test_loss_bkd_examples(rng):
    f = [rng.standard_normal((3, 4))]
    assert loss_bkd(f, [f[0].copy()])[0] == 0
    a = np.zeros((1, 1))
    assert loss_bkd([a], [a + 2])[0] == pytest.approx(4.0)
    fp = [rng.standard_normal((6, 4)), rng.standard_normal((6, 2))]
    q = [rng.standard_normal((6, 4)), rng.standard_normal((6, 2))]
    per_block = sum(float(((x - y) ** 2).sum(axis=1).mean()) for x, y in zip(fp, q))
    assert loss_bkd(fp, q)[0] == pytest.approx(per_block)
    with pytest.raises(ContractError):
        loss_bkd(fp, q[:1])


def test_loss_reg_examples():
    one_hot = SoftState([[0, 1]], np.array([[800.0, 0.0]]))
    assert loss_reg([one_hot])[0] == pytest.approx(0, abs=1e-300)
    half = SoftState([[0, 1]], np.zeros((1, 2)))
    assert loss_reg([half])[0] == pytest.approx(0.5)
    confirmed = SoftState([[0, 1]], np.zeros((1, 2)), np.array([True]), np.array([0]))
    assert loss_reg([confirmed])[0] == 0


def test_loss_reg_sums_over_layers(rng):
    a = SoftState(rng.integers(0, 4, (3, 2)), rng.standard_normal((3, 2)))
    b = SoftState(rng.integers(0, 4, (5, 3)), rng.standard_normal((5, 3)))
    assert loss_reg([a, b])[0] == pytest.approx(loss_reg([a])[0] + loss_reg([b])[0])


def test_loss_reg_gradient():
    r = make_rng(3)
    for _ in range(20):
        z = r.standard_normal((4, 3))
        st = SoftState(np.zeros((4, 3), int), z)
        _, (g,) = loss_reg([st])
        h = 1e-5
        for idx in np.ndindex(*z.shape):
            p = z.copy(); p[idx] += h
            m = z.copy(); m[idx] -= h
            fd = (loss_reg([SoftState(st.candidates, p)])[0] - loss_reg([SoftState(st.candidates, m)])[0]) / (2 * h)
            assert fd == pytest.approx(g[idx], rel=1e-4, abs=1e-9)


def test_combine_losses_gate():
    assert combine_losses(1.0, 2.0, 0.5, 0.6) == (3.0, False)
    assert combine_losses(1.0, 2.0, 0.5, 0.4) == (3.5, True)
    assert combine_losses(1.0, 2.0, 0.5, None) == (3.5, True)
    assert combine_losses(1.0, 2.0, 0.5, 0.5) == (3.0, False)


def _state(r0):
    r0 = np.asarray(r0, np.float64)
    return SoftState([[0, 1]], np.log(r0)[None])


def test_confirm_step_threshold():
    cb = np.array([[0.0], [1.0]])
    st = _state([0.995, 0.005])
    info = confirm_step(st, cb, 0.99)
    assert info.count == 1 and st.confirmed_index.tolist() == [0]
    st = _state([0.98, 0.02])
    assert confirm_step(st, cb, 0.99).count == 0 and not st.confirmed.any()


def test_force_confirm_residual():
    cb = np.array([[1.0, -2.0], [4.0, 2.0]])
    st = _state([0.6, 0.4])
    info = finalize_force_confirm(st, cb)
    assert st.confirmed_index.tolist() == [0]
    expect = 0.16 * ((cb[0] - cb[1]) ** 2).sum()
    assert info.truncation == pytest.approx(expect)
    assert info.truncation == pytest.approx(((cb[0] - (0.6 * cb[0] + 0.4 * cb[1])) ** 2).sum())


def test_force_confirm_tie_and_idempotence():
    cb = np.array([[0.0], [1.0]])
    st = SoftState([[1, 0]], np.zeros((1, 2)))
    finalize_force_confirm(st, cb)
    assert st.confirmed_index.tolist() == [1]
    again = finalize_force_confirm(st, cb)
    assert again.count == 0 and again.truncation == 0
    assert hard_indices(st).tolist() == [1]


def test_hard_indices_requires_all_confirmed():
    with pytest.raises(ContractError):
        hard_indices(SoftState([[0, 1]], np.zeros((1, 2))))


def _layerwise_problem(seed=0, o=16, i=16):
    r = make_rng(seed)
    b = ModelBundle([WeightMatrix("l0", r.standard_normal((o, i))), WeightMatrix("l1", r.standard_normal((o, i)))])
    return b, LayerwiseAdapter(b), CalibData(isotropic_inputs(b, 256, seed))


def test_all_threshold_confirmed_is_bit_consistent():
    # with a low threshold every sub-vector hardens during the loop, so nothing is forced
    b, ad, data = _layerwise_problem()
    cfg = CalibConfig(k=16, d=2, tau=0.51, max_epochs=3, batch_size=64)
    res = calibrate(b, ad, data, cfg, ConvexConfig(n=2, init_steps=5))
    rep = res.report
    assert rep.forced == 0
    assert rep.weights_consistent
    assert rep.final_calibration_loss == rep.final_inference_loss
    for name in b.names:
        assert res.calibration_weights[name].tobytes() == res.inference_weights[name].tobytes()


def test_no_incremental_reports_truncation():
    b, ad, data = _layerwise_problem(1)
    cfg = CalibConfig(k=16, d=2, max_epochs=2, batch_size=64, enable_incremental=False)
    res = calibrate(b, ad, data, cfg, ConvexConfig(n=4, init_steps=5))
    assert res.report.confirmed_by_threshold == 0
    assert res.report.forced == 16 * 8 * 2
    assert res.report.residual_truncation > 0
    assert not res.report.weights_consistent


def test_degenerate_arm_keeps_candidates():
    b, ad, data = _layerwise_problem(2)
    cfg = CalibConfig(k=16, d=2, max_epochs=1, batch_size=64, enable_incremental=False, enable_replacement=False)
    res = calibrate(b, ad, data, cfg, ConvexConfig(n=4, init_steps=0))
    assert sum(e.replaced for e in res.report.epochs) == 0


def test_assignments_decode_to_inference_weights():
    b, ad, data = _layerwise_problem(3)
    res = calibrate(b, ad, data, CalibConfig(k=16, d=2, max_epochs=1, batch_size=64), ConvexConfig(init_steps=5))
    for name in b.names:
        cb, a = res.codebooks[name], res.assignments[name]
        dec = cb.entries[a.indices.reshape(-1)].reshape(b[name].shape)
        assert dec.tobytes() == res.inference_weights[name].tobytes()


def test_calibration_is_deterministic():
    outs = []
    for _ in range(2):
        b, ad, data = _layerwise_problem(4)
        res = calibrate(b, ad, data, CalibConfig(k=16, d=2, max_epochs=1, batch_size=64), ConvexConfig(init_steps=5))
        outs.append(b"".join(res.codebooks[n].entries.tobytes() + res.assignments[n].indices.tobytes()
                             for n in b.names))
    assert outs[0] == outs[1]


class _NaNAdapter(LayerwiseAdapter):
    def forward(self, x, weights):
        out, feats, cache = super().forward(x, weights)
        return out, [f * np.nan for f in feats], cache


def test_divergence_dumps_state(tmp_path):
    b, _, data = _layerwise_problem(5)
    dump = tmp_path / "dump.npz"
    cfg = CalibConfig(k=16, d=2, max_epochs=1, batch_size=64, dump_path=str(dump))
    with pytest.raises(DivergenceError) as exc:
        calibrate(b, _NaNAdapter(b), data, cfg, ConvexConfig(init_steps=0))
    assert "l0/codebook" in exc.value.state
    with np.load(dump) as z:
        assert "l1/scores" in z.files


def test_config_contracts():
    with pytest.raises(ContractError):
        CalibConfig(tau=0.4)
    with pytest.raises(ContractError):
        CalibConfig(batch_size=0)


def test_invariants_hold_on_small_run():
    b, ad, data = _layerwise_problem(6)
    cfg = CalibConfig(k=16, d=2, max_epochs=2, batch_size=32, check_invariants=True)
    inv = calibrate(b, ad, data, cfg, ConvexConfig(init_steps=5)).report.invariants
    assert inv.checks > 0
    assert inv.hull_violations == 0 and inv.max_simplex_error <= 1e-6
    assert inv.max_replacement_ratio <= 1 + 1e-9
    assert inv.max_truncation_ratio <= 1 + 1e-9


def test_ratios_of_states_are_simplex(rng):
    z = rng.standard_normal((50, 4)).astype(np.float32)
    np.testing.assert_allclose(ratios(z).sum(1), 1, atol=1e-6)
