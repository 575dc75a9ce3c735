"""SGD training loop: LR halving on stalled validation, global-norm clipping.

One optimizer step consumes one Batch (a single n-gram batch, or a truncated
window of timesteps for recurrent models). The output head runs once per
timestep; its gradients are clipped together with the body gradients and
applied through column scatter-adds, so an NCE step touches only the output
columns that actually appeared in the window.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, asdict

import numpy as np

from . import corpus, evaluate, tensor
from .checkpoint import save_checkpoint
from .heads import HEAD_TYPES, NceConfig, run_head
from .model import LanguageModel, ModelConfig, RowGrad, build_model


class TrainingDiverged(RuntimeError):
    """Training aborted on a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    head_type: str = "bnce"
    batch_size: int = 128
    initial_lr: float = 0.4
    clip_threshold: float = 5.0
    z_constant: float = math.exp(9.0)
    shared_k: int = 0
    max_epochs: int = 10
    patience_epochs: int = 7
    seed: int = 12345
    precision: str = "float32"
    bptt_steps: int = 20
    log_interval: int = 200
    val_metric: str = "auto"  # auto: ppl_n for NCE heads, ppl_f for softmax
    val_full_each_epoch: bool = True

    def validate(self):
        problems = []
        if self.head_type not in HEAD_TYPES:
            problems.append(f"head_type must be one of {HEAD_TYPES}, got {self.head_type!r}")
        if self.head_type == "bnce" and self.batch_size < 2:
            problems.append("batch NCE needs batch_size >= 2 (the batch is its own noise)")
        if self.head_type == "snce" and self.shared_k < 1:
            problems.append("snce needs shared_k >= 1")
        if self.initial_lr <= 0:
            problems.append(f"initial_lr must be positive, got {self.initial_lr}")
        if self.clip_threshold <= 0:
            problems.append(f"clip_threshold must be positive, got {self.clip_threshold}")
        if self.z_constant <= 0:
            problems.append(f"z_constant must be positive, got {self.z_constant}")
        if self.precision not in tensor.DTYPES:
            problems.append(f"precision must be one of {sorted(tensor.DTYPES)}")
        if self.bptt_steps < 1:
            problems.append(f"bptt_steps must be >= 1, got {self.bptt_steps}")
        if self.patience_epochs < 1:
            problems.append(f"patience_epochs must be >= 1, got {self.patience_epochs}")
        if problems:
            raise ValueError("invalid training config:\n  " + "\n  ".join(problems))
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainState:
    lr: float
    epoch: int = 0
    step: int = 0
    best_val: float = math.inf
    stall: int = 0
    words_processed: int = 0
    train_seconds: float = 0.0
    saturated_total: int = 0
    rng_state: dict | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        del d["train_seconds"]  # wall time would break bit-identical reruns
        return d


def lr_schedule_step(state: TrainState, validation_score: float, patience: int) -> bool:
    """Update the schedule with a new validation score; returns True on improvement.

    The learning rate halves once the score has failed to improve for
    `patience` consecutive epochs, after which the stall counter resets.
    """
    if not math.isfinite(validation_score):
        raise ValueError(f"validation score must be finite, got {validation_score}")
    if validation_score < state.best_val:
        state.best_val = validation_score
        state.stall = 0
        return True
    state.stall += 1
    if state.stall >= patience:
        state.lr /= 2.0
        state.stall = 0
    return False


def component_seeds(seed: int) -> dict:
    """Expand the run seed into one child seed per random component."""
    init_ss, noise_ss, shuffle_ss = np.random.SeedSequence(seed).spawn(3)
    return {"init": init_ss, "noise": noise_ss, "shuffle": shuffle_ss}


def sgd_apply(model: LanguageModel, body_grads: dict, head_deltas: list,
              lr: float, clip_threshold: float) -> None:
    """Clip all gradients jointly, then apply theta <- theta - lr * grad.

    head_deltas is a list of (column_ids | None, delta_w, delta_c); NCE deltas
    are routed through scatter_add_columns so only touched columns change.
    """
    mats = []
    for g in body_grads.values():
        mats.append(g.rows if isinstance(g, RowGrad) else g)
    for _, dw, dc in head_deltas:
        mats.append(dw)
        mats.append(dc)
    mats = tensor.global_norm_clip(mats, clip_threshold)
    it = iter(mats)
    for name, g in body_grads.items():
        cg = next(it)
        if isinstance(g, RowGrad):
            model.body.params[name][g.ids] -= lr * cg
        else:
            model.body.params[name] -= lr * cg
    for cols, _, _ in head_deltas:
        cdw, cdc = next(it), next(it)
        if cols is None:
            model.out_w -= lr * cdw
            model.out_c -= lr * cdc
        else:
            tensor.scatter_add_columns(model.out_w, model.out_c, cols, -lr * cdw, -lr * cdc)


def step_batch(model: LanguageModel, batch: corpus.Batch, rec_state, head_type: str,
               nce_cfg: NceConfig | None, lr: float, clip_threshold: float,
               noise_rng=None, noise_counter=None):
    """One optimizer step over a batch/window. Returns (state, loss_sum, targets, saturated)."""
    body = model.body
    if rec_state is None or batch.stream_start:
        rec_state = body.init_state(batch.inputs.shape[0])
    hidden, rec_state, cache = body.forward(batch.inputs, rec_state)
    if batch.mode == "ngram":
        step_targets = [batch.targets]
    else:
        step_targets = [batch.targets[:, t] for t in range(batch.targets.shape[1])]
    errors, head_deltas = [], []
    loss_sum, saturated = 0.0, 0
    for l, tgt in zip(hidden, step_targets):
        hs = run_head(head_type, l, model.out_w, model.out_c, tgt, nce_cfg,
                      noise_rng, noise_counter)
        errors.append(hs.grads.error_hidden)
        head_deltas.append((hs.column_ids, hs.grads.delta_w, hs.grads.delta_c))
        loss_sum += hs.loss_sum
        saturated += hs.saturated
    body_grads = body.backward(cache, errors)
    sgd_apply(model, body_grads, _fold_head_deltas(head_deltas), lr, clip_threshold)
    return rec_state, loss_sum, batch.num_targets, saturated


def _fold_head_deltas(head_deltas):
    """Combine per-timestep head deltas into the window's single update.

    NCE deltas concatenate by column position (scatter accumulation makes one
    call equal to a scatter per step); full-width softmax deltas sum into one
    matrix, the window loss gradient.
    """
    if len(head_deltas) == 1:
        return head_deltas
    if head_deltas[0][0] is None:
        dw = head_deltas[0][1].copy()
        dc = head_deltas[0][2].copy()
        for _, dw_t, dc_t in head_deltas[1:]:
            dw += dw_t
            dc += dc_t
        return [(None, dw, dc)]
    cols = np.concatenate([cols_t for cols_t, _, _ in head_deltas])
    dw = np.concatenate([dw_t for _, dw_t, _ in head_deltas], axis=1)
    dc = np.concatenate([dc_t for _, _, dc_t in head_deltas], axis=1)
    return [(cols, dw, dc)]


def train(model: LanguageModel, cfg: TrainConfig, train_ids, vocab: corpus.Vocabulary,
          valid_ids=None, out_dir=None, log_fn=None, epoch_hook=None, noise_counter=None):
    """Run the full training schedule; returns the final TrainState.

    Writes metrics.log, last.ckpt and best.ckpt under out_dir when given.
    Aborts with TrainingDiverged on a non-finite loss.
    """
    cfg.validate()
    mode = "ngram" if model.config.architecture == "ffnn" else "sequential"
    seeds = component_seeds(cfg.seed)
    noise_rng = np.random.default_rng(seeds["noise"])
    shuffle_rng = np.random.default_rng(seeds["shuffle"])

    nce_cfg = None
    if cfg.head_type != "softmax":
        nce_cfg = NceConfig(
            z_constant=cfg.z_constant,
            noise=corpus.unigram_distribution(vocab),
            shared_k=cfg.shared_k,
        )

    state = TrainState(lr=cfg.initial_lr)
    metrics_file = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_file = open(os.path.join(out_dir, "metrics.log"), "w", encoding="utf-8")

    def emit(line):
        if metrics_file is not None:
            metrics_file.write(line + "\n")
            metrics_file.flush()
        if log_fn is not None:
            log_fn(line)

    def save(name):
        if out_dir is not None:
            state.rng_state = {
                "noise": noise_rng.bit_generator.state,
                "shuffle": shuffle_rng.bit_generator.state,
            }
            save_checkpoint(os.path.join(out_dir, name), model, cfg.to_dict(), state.to_dict())

    save("last.ckpt")

    metric_choice = cfg.val_metric
    if metric_choice == "auto":
        metric_choice = "ppl_f" if cfg.head_type == "softmax" else "ppl_n"

    for epoch in range(1, cfg.max_epochs + 1):
        stream = corpus.batch_stream(
            train_ids, vocab, mode, cfg.batch_size,
            context=model.config.context_length, steps=cfg.bptt_steps,
            shuffle_rng=shuffle_rng if mode == "ngram" else None,
        )
        rec_state = None
        interval_loss, interval_words = 0.0, 0
        interval_t0 = time.perf_counter()
        for batch in stream:
            try:
                rec_state, loss_sum, n_targets, saturated = step_batch(
                    model, batch, rec_state, cfg.head_type, nce_cfg,
                    state.lr, cfg.clip_threshold, noise_rng, noise_counter,
                )
            except (tensor.NonFiniteError, FloatingPointError) as exc:
                raise TrainingDiverged(
                    f"non-finite value at step {state.step + 1} epoch {epoch} "
                    f"(lr={state.lr}, saturated={state.saturated_total}): {exc}"
                ) from exc
            if not math.isfinite(loss_sum):
                raise TrainingDiverged(
                    f"non-finite loss at step {state.step + 1} epoch {epoch} "
                    f"(lr={state.lr}, saturated={state.saturated_total})"
                )
            state.step += 1
            state.words_processed += n_targets
            state.saturated_total += saturated
            interval_loss += loss_sum
            interval_words += n_targets
            if state.step % cfg.log_interval == 0:
                dt = time.perf_counter() - interval_t0
                state.train_seconds += dt
                wps = interval_words / dt if dt > 0 else 0.0
                emit(
                    f"step={state.step} epoch={epoch} "
                    f"loss={interval_loss / interval_words:.4f} wps={wps:.0f} lr={state.lr:g}"
                )
                interval_loss, interval_words = 0.0, 0
                interval_t0 = time.perf_counter()
        if interval_words:
            state.train_seconds += time.perf_counter() - interval_t0
        state.epoch = epoch

        report = None
        if valid_ids is not None:
            report = evaluate.full_eval(
                model, valid_ids, z=cfg.z_constant,
                batch_size=cfg.batch_size, steps=cfg.bptt_steps, vocab=vocab,
                full=cfg.val_full_each_epoch,
            )
            ppl_f_str = f"{report.ppl_f:.3f}" if report.ppl_f is not None else "nan"
            emit(f"epoch={epoch} val_ppl_n={report.ppl_n:.3f} val_ppl_f={ppl_f_str}")
            score = report.ppl_f if metric_choice == "ppl_f" else report.ppl_n
            if score is None:
                raise ValueError("val_metric=ppl_f requires val_full_each_epoch=true")
            improved = lr_schedule_step(state, score, cfg.patience_epochs)
            if improved:
                save("best.ckpt")
        save("last.ckpt")
        if epoch_hook is not None:
            epoch_hook(model, state, report)

    if metrics_file is not None:
        metrics_file.close()
    return state
