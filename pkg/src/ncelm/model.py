"""Network bodies that produce the last hidden layer fed to an output head.

Three architectures: a feed-forward n-gram model, a simple recurrent network
with an input projection, and an LSTM. Recurrent variants optionally end in a
fully-connected ReLU bottleneck that shrinks the hidden-to-output matrix.
Every layer implements its own backward pass; recurrent layers backpropagate
through the truncation window and detach state between windows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor

ARCHITECTURES = ("ffnn", "rnn", "lstm")

INIT_SCALE = 0.05  # uniform weight init range; biases start at zero


@dataclass
class ModelConfig:
    architecture: str
    vocab_size: int
    embed_dim: int = 200
    hidden_dims: tuple[int, ...] = ()  # ffnn fully-connected stack
    recurrent_dim: int = 600
    bottleneck_dim: int | None = None
    context_length: int = 4  # ffnn context tokens (n-1 of the n-gram)

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        self.hidden_dims = tuple(self.hidden_dims)
        if self.architecture == "ffnn" and not self.hidden_dims and not self.bottleneck_dim:
            raise ValueError("ffnn needs at least one hidden or bottleneck layer")

    @property
    def head_width(self) -> int:
        """Width of the last hidden layer, i.e. the output head's input size."""
        if self.bottleneck_dim:
            return self.bottleneck_dim
        if self.architecture == "ffnn":
            return self.hidden_dims[-1]
        return self.recurrent_dim

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture,
            "vocab_size": self.vocab_size,
            "embed_dim": self.embed_dim,
            "hidden_dims": list(self.hidden_dims),
            "recurrent_dim": self.recurrent_dim,
            "bottleneck_dim": self.bottleneck_dim,
            "context_length": self.context_length,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["hidden_dims"] = tuple(d.get("hidden_dims", ()))
        return cls(**d)


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count, output layer included."""
    v, d, h = cfg.vocab_size, cfg.embed_dim, cfg.head_width
    total = v * d + h * v + v  # embedding + output weights and biases
    if cfg.architecture == "ffnn":
        width = cfg.context_length * d
        for q in cfg.hidden_dims:
            total += width * q + q
            width = q
        if cfg.bottleneck_dim:
            total += width * cfg.bottleneck_dim + cfg.bottleneck_dim
    else:
        r = cfg.recurrent_dim
        gates = 4 * r if cfg.architecture == "lstm" else r
        total += d * gates + r * gates + gates
        if cfg.bottleneck_dim:
            total += r * cfg.bottleneck_dim + cfg.bottleneck_dim
    return total


@dataclass
class RowGrad:
    """Sparse embedding gradient: accumulated rows at unique ids."""

    ids: np.ndarray
    rows: np.ndarray


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _uniform(rng, shape, dtype):
    return rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# Layer primitives
# ---------------------------------------------------------------------------


def embed_forward(ids, table):
    """Look up and concatenate embedding rows for a B x n id block."""
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[:, None]
    b, n = ids.shape
    return table[ids.ravel()].reshape(b, n * table.shape[1])


def embed_backward(ids, upstream, embed_dim) -> RowGrad:
    """Scatter the upstream gradient back onto the referenced embedding rows."""
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[:, None]
    flat_ids = ids.ravel()
    rows = upstream.reshape(flat_ids.size, embed_dim)
    unique, (summed,) = tensor.combine_duplicate_columns(flat_ids, rows.T)
    return RowGrad(ids=unique, rows=summed.T)


def relu_dense_forward(x, w, b):
    pre = tensor.row_broadcast_add(tensor.matmul(x, w), b)
    out = np.maximum(pre, 0)
    return out, {"x": x, "w": w, "mask": pre > 0}


def relu_dense_backward(cache, upstream):
    dpre = upstream * cache["mask"]
    dw = tensor.matmul(cache["x"].T, dpre)
    db = dpre.sum(axis=0, keepdims=True)
    dx = tensor.matmul(dpre, cache["w"].T)
    return dw, db, dx


def rnn_step(x, h_prev, w_in, w_rec, b):
    pre = tensor.row_broadcast_add(tensor.matmul(x, w_in) + tensor.matmul(h_prev, w_rec), b)
    h = _sigmoid(pre)
    return h, {"x": x, "h_prev": h_prev, "h": h}


def rnn_step_backward(cache, dh, w_in, w_rec):
    h = cache["h"]
    dpre = dh * h * (1.0 - h)
    dw_in = tensor.matmul(cache["x"].T, dpre)
    dw_rec = tensor.matmul(cache["h_prev"].T, dpre)
    db = dpre.sum(axis=0, keepdims=True)
    dx = tensor.matmul(dpre, w_in.T)
    dh_prev = tensor.matmul(dpre, w_rec.T)
    return dw_in, dw_rec, db, dx, dh_prev


def lstm_step(x, h_prev, c_prev, w_x, w_h, b):
    """Standard gated cell, gate order (input, forget, output, candidate)."""
    r = h_prev.shape[1]
    z = tensor.row_broadcast_add(tensor.matmul(x, w_x) + tensor.matmul(h_prev, w_h), b)
    i = _sigmoid(z[:, :r])
    f = _sigmoid(z[:, r : 2 * r])
    o = _sigmoid(z[:, 2 * r : 3 * r])
    g = np.tanh(z[:, 3 * r :])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    cache = {"x": x, "h_prev": h_prev, "c_prev": c_prev,
             "i": i, "f": f, "o": o, "g": g, "tc": tc}
    return h, c, cache


def lstm_step_backward(cache, dh, dc, w_x, w_h):
    """Propagate (dh, dc) for one step; returns parameter grads and (dx, dh_prev, dc_prev)."""
    i, f, o, g, tc = cache["i"], cache["f"], cache["o"], cache["g"], cache["tc"]
    do = dh * tc
    dc_total = dc + dh * o * (1.0 - tc * tc)
    di = dc_total * g
    df = dc_total * cache["c_prev"]
    dg = dc_total * i
    dc_prev = dc_total * f
    dz = np.concatenate(
        [di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g * g)], axis=1
    )
    dw_x = tensor.matmul(cache["x"].T, dz)
    dw_h = tensor.matmul(cache["h_prev"].T, dz)
    db = dz.sum(axis=0, keepdims=True)
    dx = tensor.matmul(dz, w_x.T)
    dh_prev = tensor.matmul(dz, w_h.T)
    return dw_x, dw_h, db, dx, dh_prev, dc_prev


# ---------------------------------------------------------------------------
# Bodies
# ---------------------------------------------------------------------------


class FfnnBody:
    """Concatenated-context feed-forward body: embed -> ReLU stack [-> bottleneck]."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.cfg = cfg
        d = cfg.embed_dim
        self.params = {"embed": _uniform(rng, (cfg.vocab_size, d), dtype)}
        width = cfg.context_length * d
        self.layer_names = []
        dims = list(cfg.hidden_dims) + ([cfg.bottleneck_dim] if cfg.bottleneck_dim else [])
        for li, q in enumerate(dims):
            self.params[f"fc{li}_w"] = _uniform(rng, (width, q), dtype)
            self.params[f"fc{li}_b"] = np.zeros((1, q), dtype=dtype)
            self.layer_names.append(f"fc{li}")
            width = q

    def init_state(self, batch_size):
        return None

    def forward(self, inputs, state):
        x = embed_forward(inputs, self.params["embed"])
        caches = []
        for name in self.layer_names:
            x, cache = relu_dense_forward(x, self.params[f"{name}_w"], self.params[f"{name}_b"])
            caches.append(cache)
        return [x], None, {"inputs": inputs, "caches": caches}

    def backward(self, cache, errors):
        (dx,) = errors
        grads = {}
        for name, layer_cache in zip(reversed(self.layer_names), reversed(cache["caches"])):
            dw, db, dx = relu_dense_backward(layer_cache, dx)
            grads[f"{name}_w"] = dw
            grads[f"{name}_b"] = db
        grads["embed"] = embed_backward(cache["inputs"], dx, self.cfg.embed_dim)
        return grads


class _RecurrentBody:
    """Shared window plumbing for the recurrent bodies."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.cfg = cfg
        self.dtype = dtype
        self.params = {"embed": _uniform(rng, (cfg.vocab_size, cfg.embed_dim), dtype)}
        if cfg.bottleneck_dim:
            self.params["bottleneck_w"] = _uniform(
                rng, (cfg.recurrent_dim, cfg.bottleneck_dim), dtype
            )
            self.params["bottleneck_b"] = np.zeros((1, cfg.bottleneck_dim), dtype=dtype)

    def _maybe_bottleneck(self, h):
        if self.cfg.bottleneck_dim:
            return relu_dense_forward(h, self.params["bottleneck_w"], self.params["bottleneck_b"])
        return h, None

    def _bottleneck_backward(self, cache, err, grads):
        if cache is None:
            return err
        dw, db, dh = relu_dense_backward(cache, err)
        _accumulate(grads, "bottleneck_w", dw)
        _accumulate(grads, "bottleneck_b", db)
        return dh


def _accumulate(grads, name, val):
    if name in grads:
        grads[name] += val
    else:
        grads[name] = val


class RnnBody(_RecurrentBody):
    """Simple recurrent body: embedding, input projection, sigmoid recurrence."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        super().__init__(cfg, rng, dtype)
        d, r = cfg.embed_dim, cfg.recurrent_dim
        self.params["rnn_w_in"] = _uniform(rng, (d, r), dtype)
        self.params["rnn_w_rec"] = _uniform(rng, (r, r), dtype)
        self.params["rnn_b"] = np.zeros((1, r), dtype=dtype)

    def init_state(self, batch_size):
        return {"h": np.zeros((batch_size, self.cfg.recurrent_dim), dtype=self.dtype)}

    def forward(self, inputs, state):
        inputs = np.asarray(inputs)
        h = state["h"]
        outputs, steps = [], []
        for t in range(inputs.shape[1]):
            x = embed_forward(inputs[:, t], self.params["embed"])
            h, step_cache = rnn_step(
                x, h, self.params["rnn_w_in"], self.params["rnn_w_rec"], self.params["rnn_b"]
            )
            out, bn_cache = self._maybe_bottleneck(h)
            outputs.append(out)
            steps.append((step_cache, bn_cache))
        return outputs, {"h": h}, {"inputs": inputs, "steps": steps}

    def backward(self, cache, errors):
        grads = {}
        embed_ids, embed_rows = [], []
        dh_next = None
        for t in range(len(cache["steps"]) - 1, -1, -1):
            step_cache, bn_cache = cache["steps"][t]
            dh = self._bottleneck_backward(bn_cache, errors[t], grads)
            if dh_next is not None:
                dh = dh + dh_next
            dw_in, dw_rec, db, dx, dh_next = rnn_step_backward(
                step_cache, dh, self.params["rnn_w_in"], self.params["rnn_w_rec"]
            )
            _accumulate(grads, "rnn_w_in", dw_in)
            _accumulate(grads, "rnn_w_rec", dw_rec)
            _accumulate(grads, "rnn_b", db)
            embed_ids.append(cache["inputs"][:, t])
            embed_rows.append(dx)
        grads["embed"] = embed_backward(
            np.concatenate(embed_ids), np.concatenate(embed_rows, axis=0), self.cfg.embed_dim
        )
        return grads


class LstmBody(_RecurrentBody):
    """LSTM body with input, forget and output gates and a tanh candidate."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        super().__init__(cfg, rng, dtype)
        d, r = cfg.embed_dim, cfg.recurrent_dim
        self.params["lstm_w_x"] = _uniform(rng, (d, 4 * r), dtype)
        self.params["lstm_w_h"] = _uniform(rng, (r, 4 * r), dtype)
        b = np.zeros((1, 4 * r), dtype=dtype)
        b[0, r : 2 * r] = 1.0  # forget-gate bias keeps early cell state alive
        self.params["lstm_b"] = b

    def init_state(self, batch_size):
        r = self.cfg.recurrent_dim
        return {
            "h": np.zeros((batch_size, r), dtype=self.dtype),
            "c": np.zeros((batch_size, r), dtype=self.dtype),
        }

    def forward(self, inputs, state):
        inputs = np.asarray(inputs)
        h, c = state["h"], state["c"]
        outputs, steps = [], []
        for t in range(inputs.shape[1]):
            x = embed_forward(inputs[:, t], self.params["embed"])
            h, c, step_cache = lstm_step(
                x, h, c, self.params["lstm_w_x"], self.params["lstm_w_h"], self.params["lstm_b"]
            )
            out, bn_cache = self._maybe_bottleneck(h)
            outputs.append(out)
            steps.append((step_cache, bn_cache))
        return outputs, {"h": h, "c": c}, {"inputs": inputs, "steps": steps}

    def backward(self, cache, errors):
        grads = {}
        embed_ids, embed_rows = [], []
        dh_next = None
        dc_next = None
        for t in range(len(cache["steps"]) - 1, -1, -1):
            step_cache, bn_cache = cache["steps"][t]
            dh = self._bottleneck_backward(bn_cache, errors[t], grads)
            if dh_next is not None:
                dh = dh + dh_next
            dc = dc_next if dc_next is not None else np.zeros_like(dh)
            dw_x, dw_h, db, dx, dh_next, dc_next = lstm_step_backward(
                step_cache, dh, dc, self.params["lstm_w_x"], self.params["lstm_w_h"]
            )
            _accumulate(grads, "lstm_w_x", dw_x)
            _accumulate(grads, "lstm_w_h", dw_h)
            _accumulate(grads, "lstm_b", db)
            embed_ids.append(cache["inputs"][:, t])
            embed_rows.append(dx)
        grads["embed"] = embed_backward(
            np.concatenate(embed_ids), np.concatenate(embed_rows, axis=0), self.cfg.embed_dim
        )
        return grads


_BODY_CLASSES = {"ffnn": FfnnBody, "rnn": RnnBody, "lstm": LstmBody}


@dataclass
class LanguageModel:
    """A body plus the output-layer parameters shared by all heads."""

    config: ModelConfig
    body: object
    out_w: np.ndarray  # head_width x V
    out_c: np.ndarray  # 1 x V

    def parameters(self) -> dict:
        params = dict(self.body.params)
        params["out_w"] = self.out_w
        params["out_c"] = self.out_c
        return params

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters().values())


def build_model(cfg: ModelConfig, rng, precision="float32") -> LanguageModel:
    dtype = tensor.resolve_dtype(precision)
    body = _BODY_CLASSES[cfg.architecture](cfg, rng, dtype)
    out_w = _uniform(rng, (cfg.head_width, cfg.vocab_size), dtype)
    out_c = np.zeros((1, cfg.vocab_size), dtype=dtype)
    return LanguageModel(config=cfg, body=body, out_w=out_w, out_c=out_c)
