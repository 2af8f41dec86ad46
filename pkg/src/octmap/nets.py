"""Two-layer MLP decoders with hand-written backprop, plus Adam.

Each decoder is two fully-connected layers with a ReLU between them
(hidden width 32 by default).  The occupancy head applies a sigmoid,
the color head is raw at train time and only clamped when images are
written.  Forward and backward are pure given frozen weights; optimizer
steps require exclusive access to the parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass
class Activations:
    """Saved forward tensors needed by the backward pass."""

    x: np.ndarray      # (n, in)
    pre1: np.ndarray   # (n, hidden) pre-ReLU
    out: np.ndarray    # (n, out) raw head output


class MlpDecoder:
    """y = W2 relu(W1 x + b1) + b2."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int = 32,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim, self.out_dim, self.hidden = in_dim, out_dim, hidden
        b1 = np.sqrt(6.0 / in_dim)
        b2 = np.sqrt(6.0 / hidden)
        self.w1 = rng.uniform(-b1, b1, (hidden, in_dim))
        self.b1 = np.zeros(hidden)
        self.w2 = rng.uniform(-b2, b2, (out_dim, hidden))
        self.b2 = np.zeros(out_dim)

    def params(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]

    def set_params(self, params: list[np.ndarray]):
        self.w1, self.b1, self.w2, self.b2 = [np.array(p) for p in params]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Activations]:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.in_dim:
            raise ValueError(f"expected input dim {self.in_dim}, got {x.shape[1]}")
        pre1 = x @ self.w1.T + self.b1
        h = np.maximum(pre1, 0.0)
        out = h @ self.w2.T + self.b2
        return out, Activations(x, pre1, out)

    def backward(self, acts: Activations, dout: np.ndarray):
        """Exact reverse-mode gradients.

        Returns (dx, [dw1, db1, dw2, db2]) for the given upstream
        gradient d(loss)/d(raw output).
        """
        dout = np.atleast_2d(np.asarray(dout, dtype=np.float64))
        if dout.shape != acts.out.shape:
            raise ValueError("upstream gradient shape mismatch")
        h = np.maximum(acts.pre1, 0.0)
        dw2 = dout.T @ h
        db2 = dout.sum(axis=0)
        dh = dout @ self.w2
        np.multiply(dh, acts.pre1 > 0.0, out=dh)  # in place: dh becomes dpre1
        dw1 = dh.T @ acts.x
        db1 = dh.sum(axis=0)
        dx = dh @ self.w1
        return dx, [dw1, db1, dw2, db2]


def decode_occupancy(dec: MlpDecoder, z: np.ndarray):
    """Occupancy in (0, 1) via a sigmoid on the raw head output."""
    raw, acts = dec.forward(z)
    return sigmoid(raw[:, 0] if raw.shape[1] == 1 else raw), acts


def occupancy_backward(dec: MlpDecoder, acts: Activations, occ: np.ndarray,
                       docc: np.ndarray):
    """Backward through sigmoid and decoder; returns (dz, param grads)."""
    draw = (docc * occ * (1.0 - occ)).reshape(acts.out.shape)
    return dec.backward(acts, draw)


def decode_color(dec: MlpDecoder, z: np.ndarray):
    """Raw color prediction (clamped to [0, 1] only when writing images)."""
    return dec.forward(z)


@dataclass
class AdamState:
    """Bias-corrected Adam over a list of parameter tensors."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @staticmethod
    def for_params(params: list[np.ndarray], lr: float) -> "AdamState":
        return AdamState(
            lr=lr,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
        )


def adam_step(params: list[np.ndarray], grads: list[np.ndarray],
              state: AdamState) -> bool:
    """One in-place Adam update. Returns False and skips the whole step
    (including the counter) when any gradient is non-finite."""
    if any(not np.all(np.isfinite(g)) for g in grads):
        return False
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError("parameter/gradient shape mismatch")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True


@dataclass
class RowAdamState:
    """Adam over rows of one growing table (sparse-update semantics).

    Only rows that received a gradient are updated; bias correction uses
    the global step count, matching the usual sparse-Adam convention.
    """

    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    v: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def _ensure_rows(self, n_rows: int, dim: int):
        if self.m.shape[0] < n_rows or self.m.shape[1] != dim:
            grown_m = np.zeros((max(n_rows, 2 * self.m.shape[0]), dim))
            grown_v = np.zeros_like(grown_m)
            grown_m[: self.m.shape[0], : self.m.shape[1]] = self.m
            grown_v[: self.v.shape[0], : self.v.shape[1]] = self.v
            self.m, self.v = grown_m, grown_v


def adam_step_rows(table: np.ndarray, rows: np.ndarray, grads: np.ndarray,
                   state: RowAdamState, n_rows: int) -> bool:
    """Adam update of ``table[rows]`` given per-row gradients."""
    if not np.all(np.isfinite(grads)):
        return False
    state.step += 1
    state._ensure_rows(n_rows, table.shape[1])
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    m = state.m[rows] * b1 + (1.0 - b1) * grads
    v = state.v[rows] * b2 + (1.0 - b2) * np.square(grads)
    state.m[rows] = m
    state.v[rows] = v
    table[rows] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True
