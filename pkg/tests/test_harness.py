import math

import numpy as np
import pytest

from vqforge.convexopt import SoftState
from vqforge.errors import ContractError
from vqforge.harness.baselines import baseline_rtn, rtn_quantize
from vqforge.harness.experiments import SUITES, run_suite, write_csv
from vqforge.harness.metrics import histogram_edges, max_ratio_histogram
from vqforge.harness.synthetic import SyntheticSpec, gen_weights, kurtosis
from vqforge.harness.toys import (
    ToyMLP,
    random_mlp,
    random_ssm_block,
    ssm_discretize,
    ssm_forward,
    ssm_kernel,
    toy_mlp_grads,
)
from vqforge.kmeans import make_rng
from vqforge.weightio import WeightMatrix


def test_gen_weights_plain_gaussian():
    w = gen_weights(SyntheticSpec(64, 64, 1.0, 0.0, 20.0, seed=1)).values
    assert abs(kurtosis(w) - 3) < 0.5
    assert abs(w.std() - 1) < 0.05


def test_gen_weights_heavy_tails_and_determinism():
    spec = SyntheticSpec(128, 128, 0.02, 0.01, 20.0, seed=3)
    w = gen_weights(spec).values
    assert kurtosis(w) > 10
    assert gen_weights(spec) == gen_weights(spec)


def test_outlier_fraction_bounds():
    with pytest.raises(ContractError):
        SyntheticSpec(4, 4, outlier_fraction=0.2)


def test_zoh_zero_matrix():
    Eb, Bb = ssm_discretize(np.zeros((3, 3)), np.array([1.0, 2.0, 3.0]), 0.5)
    np.testing.assert_allclose(Eb, np.eye(3))
    np.testing.assert_allclose(Bb[:, 0], [0.5, 1.0, 1.5])


def test_zoh_scalar():
    Eb, Bb = ssm_discretize([[-1.0]], [1.0], 0.1)
    assert Eb[0, 0] == pytest.approx(math.exp(-0.1), rel=1e-12)
    assert Bb[0, 0] == pytest.approx(1 - math.exp(-0.1), rel=1e-12)
    assert round(Eb[0, 0], 6) == 0.904837 and round(Bb[0, 0], 6) == 0.095163


def test_zoh_diagonal_matches_scalar_formula():
    lam = np.array([-0.5, -2.0, 0.3, 1e-9])
    B = np.array([1.0, -1.0, 2.0, 0.5])
    delta = 0.2
    Eb, Bb = ssm_discretize(np.diag(lam), B, delta)
    np.testing.assert_allclose(np.diag(Eb), np.exp(delta * lam), rtol=1e-6)
    expect = np.expm1(delta * lam) / lam * B
    np.testing.assert_allclose(Bb[:, 0], expect, rtol=1e-6)


def test_zoh_rejects_nonpositive_delta():
    with pytest.raises(ContractError):
        ssm_discretize(np.eye(2), np.ones(2), 0.0)


def test_ssm_forward_examples():
    block = random_ssm_block(4, 2, 3, seed=0)
    assert not ssm_forward(block, np.zeros(10)).any()
    Eb, Bb = block.discretized()
    y = ssm_forward(block, np.array([2.0]))
    assert y[0] == pytest.approx((block.P @ Bb).item() * 2.0)


def test_ssm_duality():
    for seed in range(20):
        block = random_ssm_block(8, 2, 3, seed=seed)
        x = make_rng(seed).standard_normal((32, 5))
        a = ssm_forward(block, x, "recurrence")
        b = ssm_forward(block, x, "conv")
        assert np.linalg.norm(a - b) <= 1e-5 * np.linalg.norm(a)


def test_ssm_kernel_first_tap():
    block = random_ssm_block(3, 2, 2, seed=1)
    _, Bb = block.discretized()
    assert ssm_kernel(block, 1)[0] == pytest.approx((block.P @ Bb).item())


def test_ssm_block_forward_shapes():
    block = random_ssm_block(4, 6, 8, seed=2)
    out, v, s = block.forward(np.ones((2, 5, 6), np.float32))
    assert out.shape == (2, 5, 6) and v.shape == (2, 5, 8) and s.shape == (2, 5, 8)


def test_mlp_zero_network():
    mlp = ToyMLP(np.zeros((4, 3)), np.zeros(4), np.zeros((2, 4)), np.zeros(2))
    loss, g = toy_mlp_grads(mlp, np.ones((5, 3)), np.zeros((5, 2)))
    assert loss == 0 and not g["fc1"].any() and not g["fc2"].any()


def test_mlp_backward_finite_difference():
    for seed in range(10):
        mlp = random_mlp(5, 7, 3, seed)
        r = make_rng(seed + 100)
        x, y = r.standard_normal((6, 5)), r.standard_normal((6, 3))
        _, g = toy_mlp_grads(mlp, x, y)
        for name in ("fc1", "fc2"):
            w = mlp.weights()
            h = 1e-6
            fd = np.zeros_like(w[name])
            for idx in np.ndindex(*fd.shape):
                wp = dict(w); wp[name] = w[name].copy(); wp[name][idx] += h
                wm = dict(w); wm[name] = w[name].copy(); wm[name][idx] -= h
                fd[idx] = (toy_mlp_grads(mlp, x, y, wp)[0] - toy_mlp_grads(mlp, x, y, wm)[0]) / (2 * h)
            np.testing.assert_allclose(g[name], fd, rtol=1e-4, atol=1e-7)


def test_rtn_examples():
    q, scale = rtn_quantize(np.array([-1.0, -0.5, 0.0, 0.5, 1.0]), 2)
    assert q.tolist() == [-1, -1, 0, 1, 1] and scale == 1.0
    grid = np.array([[-3.0, 0.0, 1.0, 3.0]])
    assert baseline_rtn(WeightMatrix("g", grid), 3).values.tolist() == grid.tolist()
    z, s = rtn_quantize(np.zeros(4), 2)
    assert not z.any() and s == 0.0


def test_histogram_examples():
    edges = histogram_edges(4)
    assert edges[0] == 0.25 and edges[-1] == 1.0
    assert np.allclose(np.diff(edges)[:-1], 0.05)
    uniform = SoftState(np.zeros((10, 4), int), np.zeros((10, 4)))
    _, counts = max_ratio_histogram(uniform)
    assert counts[0] == 10 and counts.sum() == 10
    done = SoftState(np.zeros((7, 4), int), np.zeros((7, 4)), np.ones(7, bool), np.zeros(7, int))
    _, counts = max_ratio_histogram(done)
    assert counts[-1] == 7 and counts.sum() == 7
    mixed = SoftState(np.zeros((30, 4), int), make_rng(0).standard_normal((30, 4)) * 3)
    assert max_ratio_histogram([mixed, uniform])[1].sum() == 40


@pytest.mark.parametrize("suite", SUITES)
def test_quick_suites_run(suite, tmp_path):
    rep = run_suite(suite, seed=0, quick=True)
    assert rep["suite"] == suite and rep["rows"]
    assert not any(k.startswith("_") for k in rep)
    write_csv(rep, tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().count("\n") == len(rep["rows"]) + 1
