"""Embedding network: bidirectional tanh recurrent layers and a linear-tanh output,
with hand-written backpropagation through time.

Shapes: features T x F, hidden states T x H per direction, embeddings T x F x K.
"""
from dataclasses import asdict, dataclass
from typing import Dict, List, Tuple

import numpy as np

from src.utils.errors import ShapeError

Params = Dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelHyper:
    num_freq: int
    embedding_dim: int = 20
    num_anchors: int = 6
    hidden: int = 64
    layers: int = 2
    recurrent: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def _layer_dims(hyper: ModelHyper) -> List[Tuple[int, int]]:
    dims, fan_in = [], hyper.num_freq
    for _ in range(hyper.layers):
        dims.append((fan_in, hyper.hidden))
        fan_in = 2 * hyper.hidden if hyper.recurrent else hyper.hidden
    return dims


def output_fan_in(hyper: ModelHyper) -> int:
    if hyper.layers == 0:
        return hyper.num_freq
    return 2 * hyper.hidden if hyper.recurrent else hyper.hidden


def init_params(hyper: ModelHyper, rng: np.random.Generator) -> Params:
    params: Params = {}
    for i, (fan_in, hidden) in enumerate(_layer_dims(hyper)):
        scale = 1.0 / np.sqrt(fan_in)
        if hyper.recurrent:
            for d in ("fw", "bw"):
                params[f"l{i}.{d}.Wx"] = rng.uniform(-scale, scale, (fan_in, hidden))
                params[f"l{i}.{d}.Wh"] = rng.uniform(-1.0, 1.0, (hidden, hidden)) / np.sqrt(hidden)
                params[f"l{i}.{d}.b"] = np.zeros(hidden)
        else:
            params[f"l{i}.W"] = rng.uniform(-scale, scale, (fan_in, hidden))
            params[f"l{i}.b"] = np.zeros(hidden)
    fan_in = output_fan_in(hyper)
    scale = 1.0 / np.sqrt(fan_in)
    out_dim = hyper.num_freq * hyper.embedding_dim
    params["out.W"] = rng.uniform(-scale, scale, (fan_in, out_dim))
    params["out.b"] = np.zeros(out_dim)
    return params


def _rnn_forward(X: np.ndarray, Wx: np.ndarray, Wh: np.ndarray, b: np.ndarray,
                 reverse: bool) -> np.ndarray:
    T, hidden = X.shape[0], Wh.shape[0]
    pre = X @ Wx + b
    H = np.zeros((T, hidden))
    h = np.zeros(hidden)
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        h = np.tanh(pre[t] + h @ Wh)
        H[t] = h
    return H


def _rnn_backward(X: np.ndarray, H: np.ndarray, dH: np.ndarray, Wx: np.ndarray,
                  Wh: np.ndarray, reverse: bool):
    T, hidden = H.shape
    dWx = np.zeros_like(Wx)
    dWh = np.zeros_like(Wh)
    dpre = np.zeros((T, hidden))
    dh_next = np.zeros(hidden)
    steps = range(T) if reverse else range(T - 1, -1, -1)
    for t in steps:
        prev_t = t + 1 if reverse else t - 1
        h_prev = H[prev_t] if 0 <= prev_t < T else np.zeros(hidden)
        da = (dH[t] + dh_next) * (1.0 - H[t] ** 2)
        dpre[t] = da
        dWh += np.outer(h_prev, da)
        dh_next = da @ Wh.T
    dWx += X.T @ dpre
    db = dpre.sum(axis=0)
    dX = dpre @ Wx.T
    return dX, dWx, dWh, db


def forward(params: Params, hyper: ModelHyper, features: np.ndarray):
    """Embeddings V (T x F x K) plus the cache needed by `backward`."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != hyper.num_freq:
        raise ShapeError(f"Expected T x {hyper.num_freq} features, got shape {x.shape}")
    cache = {"inputs": []}
    h = x
    for i in range(hyper.layers):
        cache["inputs"].append(h)
        if hyper.recurrent:
            fw = _rnn_forward(h, params[f"l{i}.fw.Wx"], params[f"l{i}.fw.Wh"], params[f"l{i}.fw.b"], False)
            bw = _rnn_forward(h, params[f"l{i}.bw.Wx"], params[f"l{i}.bw.Wh"], params[f"l{i}.bw.b"], True)
            cache[f"l{i}.fw"], cache[f"l{i}.bw"] = fw, bw
            h = np.concatenate([fw, bw], axis=1)
        else:
            h = np.tanh(h @ params[f"l{i}.W"] + params[f"l{i}.b"])
            cache[f"l{i}.out"] = h
    cache["top"] = h
    V = np.tanh(h @ params["out.W"] + params["out.b"])
    cache["V"] = V
    T = x.shape[0]
    return V.reshape(T, hyper.num_freq, hyper.embedding_dim), cache


def backward(params: Params, hyper: ModelHyper, cache: dict, dV: np.ndarray) -> Params:
    """Gradients of every parameter given dLoss/dV (T x F x K)."""
    grads: Params = {}
    T = dV.shape[0]
    V = cache["V"]
    da = dV.reshape(T, -1) * (1.0 - V ** 2)
    grads["out.W"] = cache["top"].T @ da
    grads["out.b"] = da.sum(axis=0)
    dh = da @ params["out.W"].T
    for i in reversed(range(hyper.layers)):
        x = cache["inputs"][i]
        if hyper.recurrent:
            hidden = hyper.hidden
            dx_total = np.zeros_like(x)
            for d, reverse, part in (("fw", False, dh[:, :hidden]), ("bw", True, dh[:, hidden:])):
                dx, dWx, dWh, db = _rnn_backward(x, cache[f"l{i}.{d}"], part,
                                                 params[f"l{i}.{d}.Wx"], params[f"l{i}.{d}.Wh"], reverse)
                grads[f"l{i}.{d}.Wx"], grads[f"l{i}.{d}.Wh"], grads[f"l{i}.{d}.b"] = dWx, dWh, db
                dx_total += dx
            dh = dx_total
        else:
            out = cache[f"l{i}.out"]
            dpre = dh * (1.0 - out ** 2)
            grads[f"l{i}.W"] = x.T @ dpre
            grads[f"l{i}.b"] = dpre.sum(axis=0)
            dh = dpre @ params[f"l{i}.W"].T
    return grads
