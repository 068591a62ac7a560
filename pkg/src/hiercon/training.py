"""Adam, batch sampling, early stopping and evaluation for the head."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as tc
from .data import Manifest
from .losses import Batch, LossConfig, total_loss
from .metrics import ScoredSet, compute_eer
from .model import AttentionRecord, HierConParams, ModelConfig, forward_batch, init_params

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 50
    patience: int = 10
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_batch_size: int = 64
    zero_residual_init: bool = True

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "max_epochs", "patience", "adam_eps", "eval_batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.patience > self.max_epochs:
            raise ValueError(f"patience ({self.patience}) exceeds max_epochs ({self.max_epochs})")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")


def finetune_profile(**overrides) -> TrainConfig:
    """Optimiser settings used when fine-tuning alongside a full backbone."""
    return replace(TrainConfig(learning_rate=1e-6, batch_size=16, max_epochs=50), **overrides)


# Adam ------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update; inputs are left untouched."""
    b1, b2, lr, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.learning_rate, cfg.adam_eps
    step = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if np.shape(g) != np.shape(p):
            raise tc.ShapeError(f"gradient for {name} has shape {np.shape(g)}, parameter has {np.shape(p)}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**step)
        v_hat = v / (1.0 - b2**step)
        new_p[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(new_m, new_v, step)


# batching --------------------------------------------------------------------

def make_batches(items, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffle indices with a (seed, epoch)-keyed generator and cut batches.

    ``items`` is a count or anything with ``len``. The last batch may be short.
    """
    n = items if isinstance(items, (int, np.integer)) else len(items)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


# training loop ---------------------------------------------------------------

@dataclass
class TrainResult:
    params: HierConParams
    best_epoch: int
    best_val_eer: float
    history: list[dict]
    final_params: HierConParams


def _labelled(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, Manifest):
        return data.load_all(), data.labels
    values, labels = data
    return np.asarray(values, dtype=np.float64), np.asarray(labels, dtype=np.int64)


def _batch_losses(values, labels, params, model_cfg, loss_cfg, training, rng):
    out = forward_batch(values, params, model_cfg, training=training, rng=rng)
    return total_loss(Batch(out.f, labels, out.logits), loss_cfg)


def train(
    model_cfg: ModelConfig,
    train_data,
    val_data,
    cfg: TrainConfig,
    params: HierConParams | None = None,
    history_path=None,
) -> TrainResult:
    """Optimise the joint objective with early stopping on validation EER.

    ``train_data``/``val_data`` are manifests or ``(values, labels)`` pairs.
    Epoch 0 in the history is the untrained model (losses in eval mode).
    """
    x_tr, y_tr = _labelled(train_data)
    x_va, y_va = _labelled(val_data)
    if len(np.unique(y_va)) < 2:
        raise ValueError("validation data must contain both classes")
    if params is None:
        params = init_params(model_cfg, seed=cfg.seed, zero_residual=cfg.zero_residual_init)
    arrays = params.arrays()
    state = AdamState.zeros_like(arrays)
    log_fh = open(history_path, "w") if history_path is not None else None

    def emit(record):
        history.append(record)
        if log_fh is not None:
            log_fh.write(json.dumps(record) + "\n")
            log_fh.flush()
        log.info("epoch %d total=%.5f ce=%.5f con=%.5f val_eer=%.4f", record["epoch"], record["total"], record["ce"], record["con"], record["val_eer"])

    history: list[dict] = []
    last_finite = None
    try:
        sums = np.zeros(3)
        for idx in make_batches(len(y_tr), cfg.batch_size, cfg.seed, 0):
            total, ce, con = _batch_losses(x_tr[idx], y_tr[idx], params, model_cfg, cfg.loss, False, None)
            if not np.isfinite(total.item()):
                raise TrainingDiverged(f"non-finite loss before training: total={total.item()} ce={ce} con={con}")
            sums += len(idx) * np.array([total.item(), ce, con])
        val = evaluate(model_cfg, params, (x_va, y_va), batch_size=cfg.eval_batch_size)
        emit(_record(0, sums / len(y_tr), val.eer))
        best_params, best_epoch, best_eer = params, 0, val.eer

        for epoch in range(1, cfg.max_epochs + 1):
            sums = np.zeros(3)
            for b, idx in enumerate(make_batches(len(y_tr), cfg.batch_size, cfg.seed, epoch)):
                params = HierConParams.from_arrays(model_cfg, arrays).requires_grad_(True)
                rng = np.random.default_rng([cfg.seed, epoch, b])
                total, ce, con = _batch_losses(x_tr[idx], y_tr[idx], params, model_cfg, cfg.loss, True, rng)
                if not np.isfinite(total.item()):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, batch {b}: total={total.item()} ce={ce} con={con}; "
                        f"last finite losses: {last_finite}"
                    )
                last_finite = {"epoch": epoch, "batch": b, "total": total.item(), "ce": ce, "con": con}
                total.backward()
                grads = {k: t.grad if t.grad is not None else np.zeros_like(t.data) for k, t in params.named().items()}
                arrays, state = adam_step(arrays, grads, state, cfg)
                sums += len(idx) * np.array([total.item(), ce, con])
            params = HierConParams.from_arrays(model_cfg, arrays)
            val = evaluate(model_cfg, params, (x_va, y_va), batch_size=cfg.eval_batch_size)
            emit(_record(epoch, sums / len(y_tr), val.eer))
            if val.eer < best_eer:
                best_params, best_epoch, best_eer = params, epoch, val.eer
            elif epoch - best_epoch >= cfg.patience:
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(best_params, best_epoch, best_eer, history, params)


def _record(epoch: int, means: np.ndarray, val_eer: float) -> dict:
    return {"epoch": epoch, "total": float(means[0]), "ce": float(means[1]), "con": float(means[2]), "val_eer": float(val_eer)}


# evaluation ------------------------------------------------------------------

@dataclass
class EvalResult:
    ids: list[str]
    scores: np.ndarray
    labels: np.ndarray
    eer: float | None
    records: AttentionRecord | None = None


def evaluate(
    model_cfg: ModelConfig,
    params: HierConParams,
    data,
    batch_size: int = 64,
    with_attention: bool = False,
) -> EvalResult:
    """Eval-mode scores ``P(fake)``; the projection head output is ignored.

    ``eer`` is None when ``data`` holds a single class.
    """
    if isinstance(data, Manifest):
        ids = [r.utterance_id for r in data.rows]
    else:
        ids = [str(i) for i in range(len(data[1]))]
    values, labels = _labelled(data)
    if values.shape[1:] != model_cfg.feature_shape:
        raise tc.ShapeError(f"features {values.shape[1:]} do not match checkpoint config {model_cfg.feature_shape}")
    scores, alphas, betas, gammas = [], [], [], []
    for start in range(0, len(labels), batch_size):
        out = forward_batch(values[start : start + batch_size], params, model_cfg, training=False)
        p = tc.softmax(out.logits, axis=-1).data
        scores.append(p[:, 1])
        if with_attention:
            alphas.append(out.record.alpha)
            betas.append(out.record.beta)
            gammas.append(out.record.gamma)
    scores = np.concatenate(scores)
    eer = compute_eer(ScoredSet(scores, labels)) if len(np.unique(labels)) == 2 else None
    records = None
    if with_attention:
        records = AttentionRecord(np.concatenate(alphas), np.concatenate(betas), np.concatenate(gammas))
    return EvalResult(ids, scores, labels, eer, records)


def write_history(history: Sequence[dict], path) -> None:
    Path(path).write_text("".join(json.dumps(r) + "\n" for r in history))
