"""Losses, the Adam optimizer, and the training/evaluation loops.

Everything here is deterministic given the config seed: parameter init,
batch shuffling, and the evaluation chunking are all fixed, so one
(config, dataset) pair reproduces its metrics log and checkpoint exactly.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields

import numpy as np

from .backprop import model_backward, model_forward_cached
from .datasets import SequenceBatch, TASKS, apply_forecast_mask
from .dynamics import INIT_MODES, PARAM_MODES, SCHEMES
from .model import (
    ModelParams,
    flatten_params,
    head_classify,
    init_model_params,
    model_forward,
    unflatten_params,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


# --- configuration -------------------------------------------------------

@dataclass
class ModelConfig:
    """Model plus training hyperparameters, one field per config-file key."""

    p_in: int
    hidden: int
    state: int
    out: int
    n_blocks: int = 2
    scheme: str = "im"
    param_mode: str = "relu"
    init_mode: str = "uniform01"
    dt: float = 1.0
    include_time: bool = False
    task: str = "classify"
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 200
    seed: int = 0
    patience: int = 20
    grad_clip: float = 0.0
    forecast_l1: int = 0
    forecast_l2: int = 0

    def __post_init__(self):
        for name in ("p_in", "hidden", "state", "out", "n_blocks", "batch_size", "epochs"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.param_mode not in PARAM_MODES:
            raise ValueError(f"param_mode must be one of {PARAM_MODES}, got {self.param_mode!r}")
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if not (self.dt > 0 and np.isfinite(self.dt)):
            raise ValueError(f"dt must be positive and finite, got {self.dt!r}")
        if not (self.learning_rate > 0 and np.isfinite(self.learning_rate)):
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate!r}")
        for name in ("seed", "patience", "forecast_l1", "forecast_l2"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 0:
                raise ValueError(f"{name} must be a nonnegative integer, got {v!r}")
        if not (self.grad_clip >= 0 and np.isfinite(self.grad_clip)):
            raise ValueError(f"grad_clip must be nonnegative, got {self.grad_clip!r}")


def _parse_scalar(kind: type, key: str, text: str):
    if kind is bool:
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"config key {key}: expected true/false, got {text!r}")
    if kind is int:
        try:
            return int(text)
        except ValueError:
            raise ValueError(f"config key {key}: expected an integer, got {text!r}") from None
    if kind is float:
        try:
            return float(text)
        except ValueError:
            raise ValueError(f"config key {key}: expected a number, got {text!r}") from None
    return text


_FIELD_KINDS = {"int": int, "float": float, "bool": bool, "str": str}


def config_from_items(items: dict[str, str]) -> ModelConfig:
    """Build a config from string key/value pairs; unknown keys are errors."""
    known = {f.name: _FIELD_KINDS[f.type] for f in fields(ModelConfig)}
    unknown = sorted(k for k in items if k not in known)
    if unknown:
        raise ValueError(f"unknown config key(s): {', '.join(unknown)}")
    kwargs = {k: _parse_scalar(known[k], k, v) for k, v in items.items()}
    required = [
        f.name
        for f in fields(ModelConfig)
        if f.default is dataclasses.MISSING and f.name not in kwargs
    ]
    if required:
        raise ValueError(f"missing required config key(s): {', '.join(required)}")
    return ModelConfig(**kwargs)


def parse_config(text: str) -> ModelConfig:
    """Parse flat `key = value` lines; '#' starts a comment."""
    items: dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {line_no}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ValueError(f"config line {line_no}: empty key")
        if key in items:
            raise ValueError(f"config line {line_no}: duplicate key {key!r}")
        items[key] = value
    return config_from_items(items)


def load_config(path: str) -> ModelConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def _format_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def config_to_text(config: ModelConfig) -> str:
    lines = [f"{f.name} = {_format_scalar(getattr(config, f.name))}" for f in fields(ModelConfig)]
    return "\n".join(lines) + "\n"


# --- losses --------------------------------------------------------------

def mse_loss(pred, target, mask=None):
    """Mean squared error over (optionally masked) positions.

    Returns (loss, cotangent of pred). With a mask of shape pred.shape[:-1],
    the mean runs over valid positions times channels only and masked
    positions get zero cotangent.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != pred.shape[:-1]:
            raise ValueError(f"mask shape {mask.shape} != position shape {pred.shape[:-1]}")
        diff = diff * mask[..., None]
        count = int(mask.sum()) * pred.shape[-1]
    else:
        count = pred.size
    if count == 0:
        return 0.0, np.zeros_like(pred)
    # overflow to inf is fine here; the training loop treats it as divergence
    with np.errstate(over="ignore"):
        loss = float(np.sum(diff * diff) / count)
    return loss, (2.0 / count) * diff


def mae_metric(pred, target, mask=None) -> float:
    """Mean absolute error over (optionally masked) positions."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = np.abs(pred - target)
    if mask is None:
        return float(diff.mean()) if diff.size else 0.0
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum()) * pred.shape[-1]
    if count == 0:
        return 0.0
    return float(np.sum(diff * mask[..., None]) / count)


def cross_entropy(logits, labels):
    """Softmax cross-entropy averaged over the batch.

    Returns (loss, cotangent of logits); the cotangent is
    (softmax - onehot) / batch.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"logits must be 2-D (batch, classes), got shape {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch size {n}")
    labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.arange(n)
    loss = float(-log_probs[rows, labels].mean())
    cot = np.exp(log_probs)
    cot[rows, labels] -= 1.0
    return loss, cot / n


# --- optimizer -----------------------------------------------------------

@dataclass
class AdamMoments:
    """First and second moment estimates, keyed like the parameter dict."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


def adam_init(params: dict[str, np.ndarray]) -> AdamMoments:
    return AdamMoments(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
    )


def adam_step(params, grads, moments: AdamMoments, lr: float, step_index: int):
    """One bias-corrected Adam update; returns (new params, new moments)."""
    if step_index < 1:
        raise ValueError(f"step_index counts from 1, got {step_index}")
    if set(grads) != set(params):
        raise ValueError("gradient keys do not match parameter keys")
    c1 = 1.0 - ADAM_BETA1**step_index
    c2 = 1.0 - ADAM_BETA2**step_index
    new_p, new_m, new_v = {}, {}, {}
    for key, p in params.items():
        g = grads[key]
        m = ADAM_BETA1 * moments.m[key] + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * moments.v[key] + (1.0 - ADAM_BETA2) * g * g
        new_m[key], new_v[key] = m, v
        new_p[key] = p - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return new_p, AdamMoments(m=new_m, v=new_v)


def gradient_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    return float(np.sqrt(total))


def clip_gradients(grads, max_norm: float):
    """Scale gradients to global L2 norm max_norm if they exceed it."""
    norm = gradient_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}, norm
    return grads, norm


# --- heads and batch loss ------------------------------------------------

def _steps_mask(batch: SequenceBatch) -> np.ndarray:
    return np.arange(batch.n_steps)[None, :] < batch.lengths[:, None]


def batch_loss(outputs: np.ndarray, batch: SequenceBatch, task: str):
    """Loss for one forward pass; returns (loss, cotangent of outputs)."""
    if task == "classify":
        logits = head_classify(outputs, batch.lengths)
        loss, cot_logits = cross_entropy(logits, batch.targets)
        cot = np.zeros_like(outputs)
        cot[np.arange(outputs.shape[0]), batch.lengths - 1] = cot_logits
        return loss, cot
    if task == "regress":
        if batch.target_kind == "vector":
            pred = head_classify(outputs, batch.lengths)
            loss, cot_pred = mse_loss(pred, batch.targets)
            cot = np.zeros_like(outputs)
            cot[np.arange(outputs.shape[0]), batch.lengths - 1] = cot_pred
            return loss, cot
        loss, cot = mse_loss(outputs, batch.targets, mask=_steps_mask(batch))
        return loss, cot
    if task == "forecast":
        if batch.forecast_split is None:
            raise ValueError("forecast task needs a batch with a recorded (L1, L2) split")
        l1, l2 = batch.forecast_split
        window = outputs[:, l1 : l1 + l2]
        mask = (l1 + np.arange(l2))[None, :] < batch.lengths[:, None]
        loss, cot_win = mse_loss(window, batch.targets, mask=mask)
        cot = np.zeros_like(outputs)
        cot[:, l1 : l1 + l2] = cot_win
        return loss, cot
    raise ValueError(f"unknown task {task!r}")


def model_loss_and_grads(
    params_dict: dict[str, np.ndarray],
    config: ModelConfig,
    batch: SequenceBatch,
    mode: str = "parallel",
):
    """Forward + loss + backward for one batch; returns (loss, grads)."""
    params = unflatten_params(params_dict, config.dt, config.param_mode)
    outputs, cache = model_forward_cached(params, config.scheme, batch.inputs, mode)
    loss, cot = batch_loss(outputs, batch, config.task)
    if not np.isfinite(loss):
        return loss, None
    grads = model_backward(params, config.scheme, cache, cot, mode)
    return loss, grads


def per_step_mse(outputs, batch: SequenceBatch) -> np.ndarray:
    """Mean squared error at each step, averaged over valid sequences."""
    if batch.target_kind != "steps":
        raise ValueError("per-step error curve needs per-step targets")
    if batch.forecast_split is not None:
        l1, l2 = batch.forecast_split
        pred = outputs[:, l1 : l1 + l2]
        steps = l1 + np.arange(l2)
    else:
        pred = outputs
        steps = np.arange(batch.n_steps)
    mask = steps[None, :] < batch.lengths[:, None]
    sq = ((pred - batch.targets) ** 2).mean(axis=-1) * mask
    denom = np.maximum(mask.sum(axis=0), 1)
    return sq.sum(axis=0) / denom


def evaluate_model(
    params_dict: dict[str, np.ndarray],
    config: ModelConfig,
    batch: SequenceBatch,
    mode: str = "parallel",
    chunk: int = 256,
) -> dict:
    """Metrics on one split: loss plus accuracy or mse/mae (and the
    per-step curve under key 'mse_steps' when targets are per-step)."""
    params = unflatten_params(params_dict, config.dt, config.param_mode)
    outs = []
    for start in range(0, batch.n_sequences, chunk):
        part = batch.take(np.arange(start, min(start + chunk, batch.n_sequences)))
        outs.append(model_forward(params, config.scheme, part.inputs, mode))
    outputs = np.concatenate(outs, axis=0)
    loss, _ = batch_loss(outputs, batch, config.task)
    metrics = {"loss": loss}
    if config.task == "classify":
        logits = head_classify(outputs, batch.lengths)
        pred = logits.argmax(axis=1)
        metrics["accuracy"] = float((pred == batch.targets).mean())
        return metrics
    if batch.target_kind == "vector":
        pred = head_classify(outputs, batch.lengths)
        metrics["mse"] = mse_loss(pred, batch.targets)[0]
        metrics["mae"] = mae_metric(pred, batch.targets)
        return metrics
    if batch.forecast_split is not None:
        l1, l2 = batch.forecast_split
        window = outputs[:, l1 : l1 + l2]
        mask = (l1 + np.arange(l2))[None, :] < batch.lengths[:, None]
    else:
        window = outputs
        mask = _steps_mask(batch)
    metrics["mse"] = mse_loss(window, batch.targets, mask=mask)[0]
    metrics["mae"] = mae_metric(window, batch.targets, mask=mask)
    metrics["mse_steps"] = per_step_mse(outputs, batch)
    return metrics


# --- training loop -------------------------------------------------------

@dataclass
class TrainResult:
    """Best-validation parameter snapshot plus the full metrics log."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    moments: AdamMoments
    adam_step_count: int
    epoch: int
    best_val: float
    rng_state: str
    metrics: list = field(default_factory=list)


def _prepare_split(batch: SequenceBatch, config: ModelConfig) -> SequenceBatch:
    if config.task == "forecast" and batch.forecast_split is None:
        batch = apply_forecast_mask(batch, config.forecast_l1, config.forecast_l2)
    if batch.n_channels != config.p_in:
        raise ValueError(
            f"config p_in = {config.p_in} but the data has {batch.n_channels} channels"
        )
    return batch


def _check_targets(batch: SequenceBatch, config: ModelConfig) -> None:
    if config.task == "classify":
        n_classes = int(batch.targets.max()) + 1 if batch.targets.size else 1
        if config.out < n_classes:
            raise ValueError(f"config out = {config.out} but labels need {n_classes} classes")
    elif batch.targets.shape[-1] != config.out:
        raise ValueError(
            f"config out = {config.out} but targets have {batch.targets.shape[-1]} channels"
        )


def _scalar_metric_rows(epoch: int, split: str, metrics: dict) -> list:
    rows = []
    for key in ("loss", "accuracy", "mse", "mae"):
        if key in metrics:
            rows.append((epoch, split, key, float(metrics[key])))
    return rows


def train(config: ModelConfig, data, out_dir: str | None = None, mode: str = "parallel"):
    """Run the epoch loop and return a TrainResult for the best-val model.

    data is (train, val, test) SequenceBatch objects; test may be None.
    Divergence (non-finite loss or gradients) aborts with the offending
    epoch and batch. With out_dir set, writes checkpoint.bin and
    metrics.csv there.
    """
    train_b, val_b, test_b = data
    train_b = _prepare_split(train_b, config)
    val_b = _prepare_split(val_b, config)
    test_b = _prepare_split(test_b, config) if test_b is not None else None
    _check_targets(train_b, config)

    model = init_model_params(
        p_in=config.p_in,
        hidden=config.hidden,
        state=config.state,
        out=config.out,
        n_blocks=config.n_blocks,
        dt=config.dt,
        init_mode=config.init_mode,
        param_mode=config.param_mode,
        seed=config.seed,
    )
    params = flatten_params(model)
    moments = adam_init(params)
    shuffle_rng = np.random.default_rng((config.seed, 0x5EED))
    step_count = 0
    rows: list = []
    best = None
    bad_epochs = 0
    n = train_b.n_sequences

    last_epoch = 0
    for epoch in range(1, config.epochs + 1):
        last_epoch = epoch
        perm = shuffle_rng.permutation(n)
        loss_sum = 0.0
        for batch_index, start in enumerate(range(0, n, config.batch_size)):
            idx = perm[start : start + config.batch_size]
            sub = train_b.take(idx)
            loss, grads = model_loss_and_grads(params, config, sub, mode)
            if grads is not None and not all(np.all(np.isfinite(g)) for g in grads.values()):
                grads = None
            if grads is None:
                raise RuntimeError(
                    f"training diverged at epoch {epoch}, batch {batch_index}: "
                    f"loss = {loss}"
                )
            if config.grad_clip > 0:
                grads, _ = clip_gradients(grads, config.grad_clip)
            step_count += 1
            params, moments = adam_step(params, grads, moments, config.learning_rate, step_count)
            loss_sum += loss * len(idx)
        rows.append((epoch, "train", "loss", loss_sum / n))
        val_metrics = evaluate_model(params, config, val_b, mode)
        rows.extend(_scalar_metric_rows(epoch, "val", val_metrics))
        val_loss = val_metrics["loss"]
        if best is None or val_loss < best[0]:
            best = (
                val_loss,
                epoch,
                {k: p.copy() for k, p in params.items()},
                AdamMoments(
                    m={k: a.copy() for k, a in moments.m.items()},
                    v={k: a.copy() for k, a in moments.v.items()},
                ),
                step_count,
            )
            bad_epochs = 0
        else:
            bad_epochs += 1
            if config.patience > 0 and bad_epochs >= config.patience:
                break

    best_val, best_epoch, best_params, best_moments, best_steps = best
    if test_b is not None:
        test_metrics = evaluate_model(best_params, config, test_b, mode)
        rows.extend(_scalar_metric_rows(best_epoch, "test", test_metrics))
        if "mse_steps" in test_metrics:
            for i, v in enumerate(test_metrics["mse_steps"]):
                rows.append((best_epoch, "test", f"mse_step_{i}", float(v)))

    result = TrainResult(
        config=config,
        params=best_params,
        moments=best_moments,
        adam_step_count=best_steps,
        epoch=best_epoch,
        best_val=best_val,
        rng_state=json.dumps(shuffle_rng.bit_generator.state),
        metrics=rows,
    )
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        from .checkpoint import Checkpoint, save_checkpoint

        save_checkpoint(
            Checkpoint.from_train_result(result), os.path.join(out_dir, "checkpoint.bin")
        )
        write_metrics_csv(os.path.join(out_dir, "metrics.csv"), rows)
    return result


def write_metrics_csv(path: str, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("epoch,split,metric,value\n")
        for epoch, split, metric, value in rows:
            fh.write(f"{epoch},{split},{metric},{format(float(value), '.17g')}\n")


def read_metrics_csv(path: str) -> list:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "epoch,split,metric,value":
            raise ValueError(f"{path}: unexpected metrics header {header!r}")
        for line in fh:
            epoch, split, metric, value = line.rstrip("\n").split(",")
            rows.append((int(epoch), split, metric, float(value)))
    return rows


def params_of(result_or_dict) -> ModelParams:
    """Model parameters from a TrainResult (or a raw dict plus config)."""
    if isinstance(result_or_dict, TrainResult):
        return unflatten_params(
            result_or_dict.params, result_or_dict.config.dt, result_or_dict.config.param_mode
        )
    raise TypeError("expected a TrainResult")
