"""Loss assembly, embedding-only L2, Adam with sparse-row semantics, and the
epoch loop with validation-AUC model selection."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, batch_iter
from .errors import ConfigError, NumericError
from .evaluation import UndefinedMetricError, auc
from .model import Model, ModelConfig
from .ndcore import Node, ParamStore, Tape


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 10
    early_stop_patience: int = 2
    l2_embedding: float = 1e-6
    seed: int = 0
    task_loss_weights: tuple[float, ...] | None = None  # default: all 1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.l2_embedding < 0:
            raise ConfigError("l2_embedding must be >= 0")
        if self.early_stop_patience < 0:
            raise ConfigError("early_stop_patience must be >= 0")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ConfigError("batch_size must be >= 1 and max_epochs >= 0")


def bce_loss(
    tape: Tape,
    preds: dict[int, Node],
    labels: np.ndarray,
    weights: dict[int, float] | None = None,
) -> Node:
    """Sum over tasks of weighted mean binary cross-entropy for one batch."""
    labels = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    terms = []
    for task in sorted(preds):
        w = 1.0 if weights is None else weights[task]
        terms.append(tape.bce(preds[task], labels[:, [task]], w))
    return tape.add_n(terms)


def l2_embedding_penalty(
    tape: Tape, params: ParamStore, touched_rows: dict[str, np.ndarray], lam: float
) -> Node:
    """lam * sum of squared norms of embedding rows looked up in this batch."""
    if lam == 0.0 or not touched_rows:
        return Node(0.0)
    terms = [
        tape.row_l2(params[table], rows, lam) for table, rows in sorted(touched_rows.items())
    ]
    return tape.add_n(terms)


@dataclass
class AdamState:
    """First/second moments per parameter plus one shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: ParamStore, **kwargs) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.value) for k, p in params.items() if p.trainable},
            v={k: np.zeros_like(p.value) for k, p in params.items() if p.trainable},
            **kwargs,
        )


def adam_step(params: ParamStore, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam over parameters with nonzero accumulated gradient.

    Embedding tables (names starting ``emb.``) update row-wise: rows whose
    gradient is exactly zero (never looked up in the batch) keep their values
    and moments untouched.
    """
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        if not p.trainable:
            continue
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient on parameter {name}")
        if name.startswith("emb."):
            rows = np.flatnonzero((g != 0.0).any(axis=1))
            if rows.size == 0:
                continue
            gm = g[rows]
            state.m[name][rows] = state.beta1 * state.m[name][rows] + (1 - state.beta1) * gm
            state.v[name][rows] = state.beta2 * state.v[name][rows] + (1 - state.beta2) * gm * gm
            m_hat = state.m[name][rows] / bc1
            v_hat = state.v[name][rows] / bc2
            p.value[rows] -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
        else:
            if not np.any(g):
                continue
            state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
            state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
            m_hat = state.m[name] / bc1
            v_hat = state.v[name] / bc2
            p.value -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ------------------------------------------------------------------ fit loop

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_auc: dict[int, float | None]
    val_avg_auc: float
    selected: bool = False


@dataclass
class FitResult:
    model: Model  # parameters restored to the best epoch
    log: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1  # -1 means the initialization checkpoint was kept
    best_avg_auc: float = float("nan")


def _validation_aucs(model: Model, val: Dataset) -> tuple[dict[int, float | None], float]:
    scores = model.predict(val)
    per_task: dict[int, float | None] = {}
    for task in model.routing.tower_tasks:
        try:
            per_task[task] = auc(scores[task], val.labels[:, task])
        except UndefinedMetricError:
            per_task[task] = None
    defined = [a for a in per_task.values() if a is not None]
    avg = float(np.mean(defined)) if defined else float("nan")
    return per_task, avg


def fit(
    variant: ModelConfig, train_ds: Dataset, val_ds: Dataset, cfg: TrainConfig
) -> FitResult:
    """Train one variant; keep the checkpoint with the best validation average
    AUC; stop after ``early_stop_patience`` consecutive non-improving epochs.

    Per-epoch batch shuffling is seeded by (cfg.seed, epoch), so runs are
    bitwise reproducible.
    """
    if train_ds.schema.vocab_sizes != val_ds.schema.vocab_sizes:
        raise ConfigError("train and validation datasets have different schemas")
    model = Model.build(variant, train_ds.schema, cfg.seed)
    tasks = model.routing.tower_tasks
    if cfg.task_loss_weights is None:
        weights = {t: 1.0 for t in tasks}
    else:
        if len(cfg.task_loss_weights) != train_ds.num_tasks:
            raise ConfigError("task_loss_weights length must equal the task count")
        weights = {t: float(cfg.task_loss_weights[t]) for t in tasks}

    state = AdamState.init(model.params)
    best_values = model.params.values_copy()
    best_auc = float("-inf")
    result = FitResult(model=model)
    bad_epochs = 0

    for epoch in range(cfg.max_epochs):
        total_loss, n_batches = 0.0, 0
        for step, batch in enumerate(
            batch_iter(train_ds, cfg.batch_size, shuffle=True, seed=[cfg.seed, epoch])
        ):
            model.params.zero_grads()
            fp = model.forward(batch.features)
            loss = bce_loss(fp.tape, fp.preds, batch.labels, weights)
            if cfg.l2_embedding > 0.0:
                pen = l2_embedding_penalty(
                    fp.tape, model.params, fp.touched_rows, cfg.l2_embedding
                )
                loss = fp.tape.add_n([loss, pen])
            loss_val = float(loss.value)
            if not np.isfinite(loss_val):
                raise NumericError(f"training diverged at epoch {epoch}, step {step}")
            fp.tape.backward(loss)
            adam_step(model.params, state, cfg.learning_rate)
            total_loss += loss_val
            n_batches += 1

        per_task, avg = _validation_aucs(model, val_ds)
        improved = np.isfinite(avg) and avg > best_auc
        if improved:
            best_auc = avg
            best_values = model.params.values_copy()
            result.best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
        result.log.append(
            EpochRecord(epoch, total_loss / max(n_batches, 1), per_task, avg)
        )
        if bad_epochs > cfg.early_stop_patience:
            break

    model.params.load_values(best_values)
    result.best_avg_auc = best_auc if np.isfinite(best_auc) else float("nan")
    for rec in result.log:
        rec.selected = rec.epoch == result.best_epoch
    return result


def write_training_log(result: FitResult, path: str | Path) -> None:
    """CSV: epoch,train_loss,val_auc_task{t}...,val_avg_auc,selected."""
    tasks = result.model.routing.tower_tasks
    header = (
        ["epoch", "train_loss"]
        + [f"val_auc_task{t}" for t in tasks]
        + ["val_avg_auc", "selected"]
    )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for rec in result.log:
            cells = [str(rec.epoch), f"{rec.train_loss:.6f}"]
            for t in tasks:
                a = rec.val_auc[t]
                cells.append("" if a is None else f"{a:.6f}")
            cells.append(f"{rec.val_avg_auc:.6f}")
            cells.append(str(int(rec.selected)))
            fh.write(",".join(cells) + "\n")
