"""Recurrent action-value network: one LSTM layer plus a linear 3-way head.

Forward, backward (truncated-at-window BPTT), and the Adam update are written
directly in numpy with float64 arithmetic. Gate pre-activations are stacked
in the order (input, forget, cell, output). The head emits one value per
action in the order (short, flat, long).
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass

import numpy as np

PARAM_FIELDS = ("w_x", "w_h", "b", "w_out", "b_out")

N_ACTIONS = 3


class NonFiniteGradientError(ArithmeticError):
    """A gradient or update contained NaN/inf; training must stop."""


@dataclass
class QNetParams:
    """All weights of the network. Treat instances as immutable snapshots."""

    w_x: np.ndarray    # (C, 4H) input-to-gate weights
    w_h: np.ndarray    # (H, 4H) recurrent gate weights
    b: np.ndarray      # (4H,) gate biases
    w_out: np.ndarray  # (H, 3) value head
    b_out: np.ndarray  # (3,) head bias

    def __post_init__(self):
        for name in PARAM_FIELDS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        c, four_h = self.w_x.shape
        h = four_h // 4
        if self.w_h.shape != (h, four_h) or self.b.shape != (four_h,):
            raise ValueError("inconsistent LSTM parameter shapes")
        if self.w_out.shape != (h, N_ACTIONS) or self.b_out.shape != (N_ACTIONS,):
            raise ValueError("inconsistent head parameter shapes")
        if any(not np.all(np.isfinite(getattr(self, n))) for n in PARAM_FIELDS):
            raise ValueError("parameters must be finite")

    @property
    def input_size(self) -> int:
        return self.w_x.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.w_h.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_FIELDS}

    def copy(self) -> "QNetParams":
        return QNetParams(**{k: v.copy() for k, v in self.arrays().items()})

    def n_parameters(self) -> int:
        return sum(v.size for v in self.arrays().values())


def init(input_size: int, hidden_size: int, seed: int) -> QNetParams:
    """Seeded initialization: weights uniform in [-1/sqrt(H), 1/sqrt(H)],
    forget-gate bias 1.0, all other biases 0."""
    if input_size < 1 or hidden_size < 1:
        raise ValueError("input_size and hidden_size must be >= 1")
    rng = np.random.default_rng(seed)
    h = hidden_size
    scale = 1.0 / np.sqrt(h)
    w_x = rng.uniform(-scale, scale, size=(input_size, 4 * h))
    w_h = rng.uniform(-scale, scale, size=(h, 4 * h))
    w_out = rng.uniform(-scale, scale, size=(h, N_ACTIONS))
    b = np.zeros(4 * h)
    b[h:2 * h] = 1.0
    return QNetParams(w_x=w_x, w_h=w_h, b=b, w_out=w_out, b_out=np.zeros(N_ACTIONS))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _forward_cached(params: QNetParams, windows: np.ndarray):
    """LSTM recurrence over a (B, L, C) batch from zero initial states.

    Returns (q, final_hidden, per-step caches for the backward pass).
    """
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim == 2:
        windows = windows[None, :, :]
    batch, length, width = windows.shape
    if width != params.input_size:
        raise ValueError(
            f"state has {width} columns but the network expects {params.input_size}")
    h_size = params.hidden_size
    h = np.zeros((batch, h_size))
    c = np.zeros((batch, h_size))
    caches = []
    for t in range(length):
        x = windows[:, t, :]
        pre = x @ params.w_x + h @ params.w_h + params.b
        gi = _sigmoid(pre[:, :h_size])
        gf = _sigmoid(pre[:, h_size:2 * h_size])
        gc = np.tanh(pre[:, 2 * h_size:3 * h_size])
        go = _sigmoid(pre[:, 3 * h_size:])
        c_new = gf * c + gi * gc
        tc = np.tanh(c_new)
        h_new = go * tc
        caches.append((x, h, c, gi, gf, gc, go, tc))
        h, c = h_new, c_new
    q = h @ params.w_out + params.b_out
    return q, h, caches


def forward(params: QNetParams, state: np.ndarray) -> np.ndarray:
    """Action values (short, flat, long) for one (L, C) state window."""
    q, _, _ = _forward_cached(params, state)
    return q[0]


def forward_batch(params: QNetParams, windows: np.ndarray) -> np.ndarray:
    """Action values for a (B, L, C) batch of state windows."""
    q, _, _ = _forward_cached(params, windows)
    return q


def backward(params: QNetParams, windows: np.ndarray,
             dq: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients given d(loss)/d(q) per sample.

    Runs the forward pass to rebuild activations, then backpropagates through
    the head and through time across the window.
    """
    dq = np.asarray(dq, dtype=np.float64)
    if dq.ndim == 1:
        dq = dq[None, :]
    _, h_final, caches = _forward_cached(params, windows)
    h_size = params.hidden_size

    grads = {name: np.zeros_like(arr) for name, arr in params.arrays().items()}
    grads["w_out"] = h_final.T @ dq
    grads["b_out"] = dq.sum(axis=0)
    dh = dq @ params.w_out.T
    dc = np.zeros_like(dh)
    for x, h_prev, c_prev, gi, gf, gc, go, tc in reversed(caches):
        dgo = dh * tc
        dc = dc + dh * go * (1.0 - tc ** 2)
        dgi = dc * gc
        dgc = dc * gi
        dgf = dc * c_prev
        d_pre = np.concatenate([
            dgi * gi * (1.0 - gi),
            dgf * gf * (1.0 - gf),
            dgc * (1.0 - gc ** 2),
            dgo * go * (1.0 - go),
        ], axis=1)
        grads["w_x"] += x.T @ d_pre
        grads["w_h"] += h_prev.T @ d_pre
        grads["b"] += d_pre.sum(axis=0)
        dh = d_pre @ params.w_h.T
        dc = dc * gf
    return grads


def gradient(params: QNetParams, batch) -> dict[str, np.ndarray]:
    """Gradient of the mean squared error against fixed per-sample targets.

    ``batch`` is a sequence of (state_window, action_index, target_value);
    targets are constants (no gradient flows through them).
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    windows = np.stack([item[0] for item in batch])
    idx = np.array([int(item[1]) for item in batch])
    targets = np.array([float(item[2]) for item in batch])
    q, _, _ = _forward_cached(params, windows)
    err = q[np.arange(len(batch)), idx] - targets
    dq = np.zeros_like(q)
    dq[np.arange(len(batch)), idx] = 2.0 * err / len(batch)
    return backward(params, windows, dq)


def mse_loss(params: QNetParams, batch) -> float:
    """The scalar loss that ``gradient`` differentiates."""
    windows = np.stack([item[0] for item in batch])
    idx = np.array([int(item[1]) for item in batch])
    targets = np.array([float(item[2]) for item in batch])
    q, _, _ = _forward_cached(params, windows)
    err = q[np.arange(len(batch)), idx] - targets
    return float(np.mean(err ** 2))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float):
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns (possibly rescaled grads, pre-clip global norm).
    """
    total = np.sqrt(sum(float(np.sum(g ** 2)) for g in grads.values()))
    if max_norm and total > max_norm:
        factor = max_norm / total
        grads = {k: v * factor for k, v in grads.items()}
    return grads, total


@dataclass
class OptimizerState:
    """Adam accumulators; one (m, v) pair per parameter array."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optimizer(params: QNetParams, learning_rate: float = 1e-3,
                   beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> OptimizerState:
    zeros = {k: np.zeros_like(v) for k, v in params.arrays().items()}
    return OptimizerState(
        m=zeros,
        v={k: np.zeros_like(v) for k, v in params.arrays().items()},
        step=0, learning_rate=learning_rate, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: QNetParams, grads: dict[str, np.ndarray],
              opt: OptimizerState) -> tuple[QNetParams, OptimizerState]:
    """One bias-corrected Adam update. Returns fresh (params, state) copies."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in {name}")
    t = opt.step + 1
    new_arrays = {}
    new_m = {}
    new_v = {}
    for name, value in params.arrays().items():
        g = grads[name]
        m = opt.beta1 * opt.m[name] + (1.0 - opt.beta1) * g
        v = opt.beta2 * opt.v[name] + (1.0 - opt.beta2) * g ** 2
        m_hat = m / (1.0 - opt.beta1 ** t)
        v_hat = v / (1.0 - opt.beta2 ** t)
        new_arrays[name] = value - opt.learning_rate * m_hat / (np.sqrt(v_hat) + opt.eps)
        new_m[name] = m
        new_v[name] = v
    new_opt = OptimizerState(m=new_m, v=new_v, step=t,
                             learning_rate=opt.learning_rate, beta1=opt.beta1,
                             beta2=opt.beta2, eps=opt.eps)
    return QNetParams(**new_arrays), new_opt


CHECKPOINT_FORMAT = "expertq-qnet"
CHECKPOINT_VERSION = 1


def _encode_array(a: np.ndarray) -> dict:
    data = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape),
            "data": base64.b64encode(data.tobytes()).decode("ascii")}


def _decode_array(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(obj["shape"]).copy()


def save_checkpoint(path, params: QNetParams, opt: OptimizerState | None = None,
                    meta: dict | None = None) -> None:
    """Write a lossless, versioned JSON checkpoint (float64 bytes, base64)."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "input_size": params.input_size,
        "hidden_size": params.hidden_size,
        "params": {k: _encode_array(v) for k, v in params.arrays().items()},
        "meta": meta or {},
    }
    if opt is not None:
        doc["optimizer"] = {
            "step": opt.step,
            "learning_rate": opt.learning_rate,
            "beta1": opt.beta1,
            "beta2": opt.beta2,
            "eps": opt.eps,
            "m": {k: _encode_array(v) for k, v in opt.m.items()},
            "v": {k: _encode_array(v) for k, v in opt.v.items()},
        }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path) -> tuple[QNetParams, OptimizerState | None, dict]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    params = QNetParams(**{k: _decode_array(v) for k, v in doc["params"].items()})
    opt = None
    if "optimizer" in doc:
        o = doc["optimizer"]
        opt = OptimizerState(
            m={k: _decode_array(v) for k, v in o["m"].items()},
            v={k: _decode_array(v) for k, v in o["v"].items()},
            step=int(o["step"]), learning_rate=float(o["learning_rate"]),
            beta1=float(o["beta1"]), beta2=float(o["beta2"]), eps=float(o["eps"]))
    return params, opt, doc.get("meta", {})
