"""Desk-scale quantization targets: a two-layer MLP and a single-input SSM block."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import numpy as np
from scipy.linalg import expm, toeplitz

from ..errors import ContractError
from ..incremental import loss_task
from ..kmeans import make_rng
from ..weightio import ModelBundle, WeightMatrix

# ---------------------------------------------------------------------------
# Two-layer MLP


@dataclass
class ToyMLP:
    """``fc2(relu(fc1(x)))`` with biases; weights are stored ``(out, in)``."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    layer_names = ("fc1", "fc2")

    def weights(self) -> Dict[str, np.ndarray]:
        return {"fc1": self.w1, "fc2": self.w2}

    def bundle(self) -> ModelBundle:
        return ModelBundle([WeightMatrix("fc1", self.w1), WeightMatrix("fc2", self.w2)], {"model": "toy-mlp"})

    def forward(self, x, weights=None):
        """Returns ``(output, cache)``."""
        w = weights or self.weights()
        z1 = x @ w["fc1"].T + self.b1
        a1 = np.maximum(z1, 0)
        z2 = a1 @ w["fc2"].T + self.b2
        return z2, (x, z1, a1, z2, w)

    def backward(self, cache, grad_out, grad_feats=None):
        """Gradients w.r.t. both weight matrices and biases.

        ``grad_feats`` optionally adds gradients arriving directly at the
        layer outputs ``z1`` and ``z2``.
        """
        x, z1, a1, z2, w = cache
        g2 = np.zeros_like(z2) if grad_out is None else np.array(grad_out, dtype=np.float64)
        if grad_feats is not None:
            g2 = g2 + grad_feats[1]
        g_w2 = g2.T @ a1
        g_b2 = g2.sum(axis=0)
        g1 = (g2 @ w["fc2"]) * (z1 > 0)
        if grad_feats is not None:
            g1 = g1 + grad_feats[0]
        g_w1 = g1.T @ x
        g_b1 = g1.sum(axis=0)
        return {"fc1": g_w1, "fc2": g_w2, "b1": g_b1, "b2": g_b2}


def toy_mlp_grads(mlp: ToyMLP, x, y, weights=None):
    """Mean-squared-error loss and its analytic gradients."""
    out, cache = mlp.forward(x, weights)
    loss, g = loss_task(out, y)
    return loss, mlp.backward(cache, g)


def random_mlp(d_in: int, hidden: int, d_out: int, seed: int, scale: float = None) -> ToyMLP:
    rng = make_rng(seed)
    s1 = scale or 1 / np.sqrt(d_in)
    s2 = scale or 1 / np.sqrt(hidden)
    return ToyMLP(
        rng.normal(0, s1, (hidden, d_in)),
        rng.normal(0, 0.1, hidden),
        rng.normal(0, s2, (d_out, hidden)),
        rng.normal(0, 0.1, d_out),
    )


class MLPAdapter:
    """Calibration adapter; distillation blocks are the outputs of fc1 and fc2."""

    def __init__(self, mlp: ToyMLP):
        self.mlp = mlp
        self.layer_names = list(ToyMLP.layer_names)
        self.fp_weights = {k: np.asarray(v, np.float32) for k, v in mlp.weights().items()}

    def forward(self, x, weights):
        out, cache = self.mlp.forward(x, weights)
        return out, [cache[1], cache[3]], cache

    def backward(self, cache, grad_outputs, grad_features):
        g = self.mlp.backward(cache, grad_outputs, grad_features)
        return {"fc1": g["fc1"], "fc2": g["fc2"]}


# ---------------------------------------------------------------------------
# State space block


def ssm_discretize(E, B, delta: float):
    """Zero-order hold: ``E_bar = exp(delta E)``, ``B_bar = (delta E)^-1 (E_bar - I) delta B``.

    ``B_bar`` comes from the top-right block of ``exp([[delta E, delta B], [0, 0]])``,
    which equals ``phi_1(delta E) delta B`` and stays finite for singular ``E``.
    """
    if delta <= 0:
        raise ContractError(f"timescale must be positive, got {delta}")
    E = np.atleast_2d(np.asarray(E, dtype=np.float64))
    B = np.asarray(B, dtype=np.float64).reshape(E.shape[0], -1)
    n, m = B.shape
    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = delta * E
    aug[:n, n:] = delta * B
    big = expm(aug)
    return big[:n, :n], big[:n, n:]


@dataclass
class ToySSMBlock:
    """``out_proj(ssm(in_proj(u)))`` with one shared single-input SSM run per channel."""

    E: np.ndarray  # (N, N)
    B: np.ndarray  # (N, 1)
    P: np.ndarray  # (1, N)
    delta: float
    w_in: np.ndarray  # (H, D)
    w_out: np.ndarray  # (D, H)

    layer_names = ("in_proj", "out_proj")

    def __post_init__(self):
        if self.delta <= 0:
            raise ContractError("timescale must be positive")

    def discretized(self):
        return ssm_discretize(self.E, self.B, self.delta)

    def weights(self):
        return {"in_proj": self.w_in, "out_proj": self.w_out}

    def bundle(self) -> ModelBundle:
        return ModelBundle([WeightMatrix("in_proj", self.w_in), WeightMatrix("out_proj", self.w_out)],
                           {"model": "toy-ssm"})

    def forward(self, u, weights=None):
        """``u``: ``(batch, M, D)`` -> ``(batch, M, D)``; also returns the SSM input and output."""
        w = weights or self.weights()
        v = u @ w["in_proj"].T
        b, m, h = v.shape
        s = ssm_forward(self, v.transpose(1, 0, 2).reshape(m, b * h))
        s = s.reshape(m, b, h).transpose(1, 0, 2)
        return s @ w["out_proj"].T, v, s


def ssm_kernel(block: ToySSMBlock, length: int) -> np.ndarray:
    """``(P B_bar, P E_bar B_bar, ..., P E_bar^(M-1) B_bar)``."""
    Eb, Bb = block.discretized()
    P = np.asarray(block.P, np.float64).reshape(1, -1)
    taps = np.empty(length)
    v = Bb[:, 0]
    for j in range(length):
        taps[j] = (P @ v)[0]
        v = Eb @ v
    return taps


def ssm_forward(block: ToySSMBlock, x, method: str = "recurrence") -> np.ndarray:
    """Run the discretized SSM over a length-``M`` sequence (optionally ``(M, channels)``).

    ``method="recurrence"`` steps ``h_t = E_bar h_(t-1) + B_bar x_t``, ``y_t = P h_t``
    from ``h_0 = 0``; ``method="conv"`` convolves with :func:`ssm_kernel`.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xs = x[:, None] if single else x
    m = xs.shape[0]
    if method == "recurrence":
        Eb, Bb = block.discretized()
        P = np.asarray(block.P, np.float64).reshape(1, -1)
        h = np.zeros((Eb.shape[0], xs.shape[1]))
        y = np.empty_like(xs)
        for t in range(m):
            h = Eb @ h + Bb @ xs[t:t + 1]
            y[t] = (P @ h)[0]
    elif method == "conv":
        k = ssm_kernel(block, m)
        y = np.tril(toeplitz(k)) @ xs
    else:
        raise ValueError(f"unknown method {method!r}")
    return y[:, 0] if single else y


def random_ssm_block(state: int, d_model: int, hidden: int, seed: int, delta: float = 0.1,
                     weights=None) -> ToySSMBlock:
    """Random stable SSM block; ``weights`` may supply ``(w_in, w_out)``."""
    rng = make_rng(seed)
    E = -np.diag(rng.uniform(0.5, 2.0, state)) + 0.1 * rng.standard_normal((state, state)) / np.sqrt(state)
    B = rng.standard_normal((state, 1))
    P = rng.standard_normal((1, state)) / np.sqrt(state)
    if weights is None:
        w_in = rng.normal(0, 1 / np.sqrt(d_model), (hidden, d_model))
        w_out = rng.normal(0, 1 / np.sqrt(hidden), (d_model, hidden))
    else:
        w_in, w_out = weights
    return ToySSMBlock(E, B, P, delta, np.asarray(w_in, np.float32), np.asarray(w_out, np.float32))
