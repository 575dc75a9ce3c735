"""Output-layer strategies: full softmax, batch NCE, and shared-noise NCE.

All heads share one contract. The forward pass scores the batch's candidate
output columns from the last hidden layer L (B x H); the backward pass returns
a HeadGradients bundle with the loss gradient for the touched output-weight
columns (delta_w), the touched bias entries (delta_c), and the error at the
hidden layer (error_hidden). Deltas follow theta <- theta - lr * delta, i.e.
they are derivatives of the loss.

The batch-NCE head treats the batch's target words as each other's noise
samples: for the target at batch row i, the targets at the other rows act as
B-1 noise samples drawn implicitly from the unigram distribution. The whole
pass is dense B x B matrix algebra; no vocabulary-sized activation is ever
materialized, which is what makes the head's cost independent of V.

`reference_nce` is a deliberately naive per-example NCE evaluator used as a
test oracle for every NCE-family head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor
from .corpus import UnigramNoise

SCORE_CLAMP = 60.0  # float32 exp() headroom; counted, never silently scaled


@dataclass
class HeadGradients:
    """Loss gradients at the output layer: weight columns, bias entries, hidden error."""

    delta_w: np.ndarray  # H x (touched columns)
    delta_c: np.ndarray  # 1 x (touched columns)
    error_hidden: np.ndarray  # B x H

    def check_finite(self):
        for a in (self.delta_w, self.delta_c, self.error_hidden):
            if not np.isfinite(a).all():
                raise tensor.NonFiniteError("head produced a non-finite gradient")
        return self


@dataclass
class NceConfig:
    """NCE head settings: fixed normalizer, shared sample count, noise distribution."""

    z_constant: float
    noise: UnigramNoise
    shared_k: int = 0

    def __post_init__(self):
        if self.z_constant <= 0:
            raise ValueError(f"z_constant must be positive, got {self.z_constant}")
        if self.shared_k < 0:
            raise ValueError(f"shared_k must be non-negative, got {self.shared_k}")


# ---------------------------------------------------------------------------
# Full softmax (reference head)
# ---------------------------------------------------------------------------


def softmax_forward_loss(l, w, c, targets):
    """Mean negative log probability of the targets under a full-V softmax."""
    scores = tensor.row_broadcast_add(tensor.matmul(l, w), c)
    scores -= scores.max(axis=1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=1, keepdims=True)
    tensor.record_shapes(probs)
    targets = np.asarray(targets, dtype=np.int64)
    picked = probs[np.arange(len(targets)), targets]
    if not (picked > 0).all():
        raise FloatingPointError("softmax assigned zero probability to a target")
    loss = float(-np.log(picked).mean())
    cache = {"probs": probs, "targets": targets, "l": l, "w": w}
    return loss, cache


def softmax_backward(cache) -> HeadGradients:
    """Cross-entropy gradient, averaged over the batch, over all V columns."""
    probs, targets, l, w = cache["probs"], cache["targets"], cache["l"], cache["w"]
    b = len(targets)
    dscores = probs.copy()
    dscores[np.arange(b), targets] -= 1.0
    dscores /= b
    tensor.record_shapes(dscores)
    return HeadGradients(
        delta_w=tensor.matmul(l.T, dscores),
        delta_c=dscores.sum(axis=0, keepdims=True),
        error_hidden=tensor.matmul(dscores, w.T),
    ).check_finite()


# ---------------------------------------------------------------------------
# Batch NCE: the batch's targets double as each other's noise samples
# ---------------------------------------------------------------------------


def _scored_output(l, w_cols, c_cols, z_constant):
    """exp(L . W_cols (+) C_cols) / Z with float32 overflow clamping.

    Returns (o, saturated_count). Clamping only applies in 32-bit training
    mode; verification runs in float64 and must never clamp.
    """
    scores = tensor.row_broadcast_add(tensor.matmul(l, w_cols), c_cols)
    saturated = 0
    if scores.dtype == np.float32:
        mask = scores > SCORE_CLAMP
        saturated = int(mask.sum())
        if saturated:
            np.clip(scores, None, SCORE_CLAMP, out=scores)
    with np.errstate(over="ignore"):  # overflow is caught by the finite check
        o = np.exp(scores - scores.dtype.type(math.log(z_constant)))
    tensor.record_shapes(o)
    if not np.isfinite(o).all():
        raise tensor.NonFiniteError("NCE output overflowed")
    return o, saturated


def bnce_forward(l, w, c, targets, cfg: NceConfig):
    """Score the batch against its own target columns: O = exp(L.W^t (+) C^t)/Z."""
    if cfg.shared_k != 0:
        raise ValueError("bnce_forward is the plain batch head; use adaptive_bnce for shared_k > 0")
    return _nce_family_forward(l, w, c, targets, cfg, extra_ids=None)


def _nce_family_forward(l, w, c, targets, cfg: NceConfig, extra_ids):
    targets = np.asarray(targets, dtype=np.int64)
    b = targets.size
    cols = targets if extra_ids is None else np.concatenate([targets, extra_ids])
    w_cols, c_cols = tensor.gather_columns(w, c, cols)
    o, saturated = _scored_output(l, w_cols, c_cols, cfg.z_constant)
    n_probs = cfg.noise.p[cols].reshape(1, -1).astype(l.dtype)
    tensor.record_shapes(n_probs)
    cache = {
        "l": l,
        "w_cols": w_cols,
        "cols": cols,
        "batch": b,
        "n_probs": n_probs,
        "saturated": saturated,
    }
    return o, cache


def bnce_normalizer(o, n_probs, k_total: int):
    """Binary-posterior denominator Y = O (+) k_total * noise probabilities."""
    return tensor.row_broadcast_add(o, np.asarray(n_probs) * k_total)


def bnce_gradient_matrix(o, y, n_probs, k_total: int):
    """Loss gradient w.r.t. the pre-exponential score matrix.

    Off-diagonal entries are O/Y (posterior probability that a noise word came
    from the model); diagonal entries are -k_total*n_i/Y_ii (negative posterior
    that the target came from noise). Columns beyond the batch width, present
    when extra shared samples are appended, are all off-diagonal.
    """
    o, y = tensor.as_matrix(o), tensor.as_matrix(y)
    if o.shape != y.shape:
        raise ValueError(f"output/normalizer shapes disagree: {o.shape} vs {y.shape}")
    if (y <= 0).any():
        raise FloatingPointError("normalizer matrix has a non-positive entry")
    g = o / y
    b = o.shape[0]
    diag = np.arange(b)
    n_row = np.asarray(n_probs).reshape(-1)
    g[diag, diag] = -(k_total * n_row[diag]) / y[diag, diag]
    tensor.record_shapes(g)
    return g


def bnce_loss(o, y, n_probs) -> float:
    """NCE objective summed over the batch.

    J = -sum_i [ log(o_ii/y_ii) + sum_{j != i} log(1 - o_ij/y_ij) ]. The
    off-diagonal term is evaluated as log1p(-o/y); entries where both o and
    the noise mass are zero contribute nothing (perfect-discrimination limit).
    """
    o, y = tensor.as_matrix(o), tensor.as_matrix(y)
    b = o.shape[0]
    diag = np.arange(b)
    o_d, y_d = o[diag, diag], y[diag, diag]
    if (o_d <= 0).any() or (y_d <= 0).any():
        raise FloatingPointError("log of non-positive target posterior")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(y > 0, o / np.where(y > 0, y, 1.0), 0.0)
        off = np.log1p(-ratio)
    off[diag, diag] = 0.0
    tensor.record_shapes(off)
    if not np.isfinite(off).all():
        raise FloatingPointError("log of non-positive value: model output reached the noise mass")
    return float(-(np.log(o_d) - np.log(y_d)).sum() - off.sum())


def bnce_backward(g, l, w_gathered) -> HeadGradients:
    """Map the gradient matrix to weight, bias and hidden-layer errors."""
    return HeadGradients(
        delta_w=tensor.matmul(l.T, g),
        delta_c=g.sum(axis=0, keepdims=True),
        error_hidden=tensor.matmul(g, w_gathered.T),
    ).check_finite()


def _bnce_pipeline(l, w, c, targets, cfg: NceConfig, extra_ids):
    """Shared forward/backward for the plain and extended batch heads."""
    o, cache = _nce_family_forward(l, w, c, targets, cfg, extra_ids)
    b = cache["batch"]
    k_total = o.shape[1] - 1
    if k_total == 0:
        raise ValueError("batch NCE needs at least one noise column (B + K >= 2)")
    y = bnce_normalizer(o, cache["n_probs"], k_total)
    g = bnce_gradient_matrix(o, y, cache["n_probs"], k_total)
    loss = bnce_loss(o, y, cache["n_probs"])
    grads = bnce_backward(g, l, cache["w_cols"])
    return loss, grads, cache


def bnce_head(l, w, c, targets, cfg: NceConfig):
    """Plain batch-NCE step: loss, gradients, touched column ids."""
    loss, grads, cache = _bnce_pipeline(l, w, c, targets, cfg, extra_ids=None)
    return loss, grads, cache


def adaptive_bnce(l, w, c, targets, cfg: NceConfig, rng):
    """Batch NCE with cfg.shared_k extra noise samples shared across the batch.

    With shared_k = 0 this is exactly the plain head; the extra columns only
    ever act as noise.
    """
    extra = None
    if cfg.shared_k > 0:
        extra = cfg.noise.sample(cfg.shared_k, rng)
    loss, grads, cache = _bnce_pipeline(l, w, c, targets, cfg, extra_ids=extra)
    return loss, grads, cache


def snce_head(l, w, c, targets, cfg: NceConfig, rng):
    """Shared-noise NCE: each target is contrasted only against K shared samples.

    The batch's other targets are scored (their columns are gathered) but
    excluded from every row's contrast set, so the normalizer uses K samples
    and the within-batch off-diagonal entries carry no loss or gradient.
    """
    if cfg.shared_k < 1:
        raise ValueError("shared-noise NCE needs shared_k >= 1")
    targets = np.asarray(targets, dtype=np.int64)
    b = targets.size
    k = cfg.shared_k
    extra = cfg.noise.sample(k, rng)
    o, cache = _nce_family_forward(l, w, c, targets, cfg, extra_ids=extra)
    n_probs = cache["n_probs"]
    y = bnce_normalizer(o, n_probs, k)
    g = bnce_gradient_matrix(o, y, n_probs, k)
    # only the target diagonal and the K shared columns contrast; zero the rest
    diag_vals = g[np.arange(b), np.arange(b)].copy()
    g[:, :b] = 0.0
    g[np.arange(b), np.arange(b)] = diag_vals
    tensor.record_shapes(g)

    diag = np.arange(b)
    o_d, y_d = o[diag, diag], y[diag, diag]
    if (o_d <= 0).any():
        raise FloatingPointError("log of non-positive target posterior")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(y[:, b:] > 0, o[:, b:] / np.where(y[:, b:] > 0, y[:, b:], 1.0), 0.0)
        off = np.log1p(-ratio)
    if not np.isfinite(off).all():
        raise FloatingPointError("log of non-positive value in the shared-noise contrast")
    loss = float(-(np.log(o_d) - np.log(y_d)).sum() - off.sum())
    grads = bnce_backward(g, l, cache["w_cols"])
    return loss, grads, cache


# ---------------------------------------------------------------------------
# Naive per-example oracle
# ---------------------------------------------------------------------------


def reference_nce(l, w_full, c_full, targets, noise_lists, z: float, p_n):
    """Per-example NCE evaluated scalar by scalar against the full output layer.

    For each batch row the target and each of its noise samples are scored
    independently; the loss and its gradients are accumulated term by term.
    O(B * K * H), float64 only, used purely as a test oracle.

    Returns (loss, dW over all V columns, dC over all V, dL at the hidden layer).
    An empty noise list contributes nothing (the posterior degenerates to 1).
    """
    l = np.asarray(l, dtype=np.float64)
    w = np.asarray(w_full, dtype=np.float64)
    c = np.asarray(c_full, dtype=np.float64)
    p_n = np.asarray(p_n, dtype=np.float64).reshape(-1)
    log_z = math.log(z)
    dw = np.zeros_like(w)
    dc = np.zeros_like(c)
    dl = np.zeros_like(l)
    loss = 0.0
    for i, t in enumerate(targets):
        noise = noise_lists[i]
        k = len(noise)
        if k == 0:
            continue
        log_p_t = float(l[i] @ w[:, t]) + c[0, t] - log_z
        p_t = math.exp(log_p_t)
        denom_t = p_t + k * p_n[t]
        post_noise_t = (k * p_n[t]) / denom_t  # P(came from noise | target word)
        loss -= log_p_t - math.log(denom_t)
        dw[:, t] -= post_noise_t * l[i]
        dc[0, t] -= post_noise_t
        dl[i] -= post_noise_t * w[:, t]
        for m in noise:
            log_p_m = float(l[i] @ w[:, m]) + c[0, m] - log_z
            p_m = math.exp(log_p_m)
            denom_m = p_m + k * p_n[m]
            post_model_m = p_m / denom_m  # P(came from the model | noise word)
            loss -= math.log(k * p_n[m]) - math.log(denom_m)
            dw[:, m] += post_model_m * l[i]
            dc[0, m] += post_model_m
            dl[i] += post_model_m * w[:, m]
    return loss, dw, dc, dl


# ---------------------------------------------------------------------------
# Dispatcher used by the trainer
# ---------------------------------------------------------------------------

HEAD_TYPES = ("softmax", "bnce", "bnce_adaptive", "snce")


@dataclass
class HeadStep:
    """One forward/backward pass through an output head."""

    loss_sum: float  # training criterion summed over the batch
    num_targets: int
    grads: HeadGradients
    column_ids: np.ndarray | None  # None means full-width (softmax)
    saturated: int = 0


def run_head(head_type, l, w, c, targets, cfg: NceConfig | None, rng=None,
             noise_counter=None) -> HeadStep:
    """Run one head step; optionally count per-id noise participations."""
    targets = np.asarray(targets, dtype=np.int64)
    b = targets.size
    if head_type == "softmax":
        loss, cache = softmax_forward_loss(l, w, c, targets)
        grads = softmax_backward(cache)
        return HeadStep(loss * b, b, grads, None)
    if cfg is None:
        raise ValueError(f"{head_type} head requires an NceConfig")
    if head_type == "bnce":
        loss, grads, cache = bnce_head(l, w, c, targets, cfg)
    elif head_type == "bnce_adaptive":
        loss, grads, cache = adaptive_bnce(l, w, c, targets, cfg, rng)
    elif head_type == "snce":
        loss, grads, cache = snce_head(l, w, c, targets, cfg, rng)
    else:
        raise ValueError(f"unknown head type {head_type!r}")
    if noise_counter is not None:
        _count_noise_roles(noise_counter, head_type, cache["cols"], b)
    return HeadStep(loss, b, grads, cache["cols"], cache["saturated"])


def _count_noise_roles(counter, head_type, cols, b):
    """Tally how many batch rows each gathered column served as a noise sample."""
    if head_type == "snce":
        roles = np.concatenate([np.zeros(b, dtype=np.int64),
                                np.full(cols.size - b, b, dtype=np.int64)])
    else:
        # each target column is noise for every other row; extras serve all rows
        roles = np.concatenate([np.full(b, b - 1, dtype=np.int64),
                                np.full(cols.size - b, b, dtype=np.int64)])
    np.add.at(counter, cols, roles)
