"""Estimator-style wrappers: fit/predict objects over the training loop.

These follow the familiar get_params/set_params convention so they can sit
in pipelines and grid searches that speak that protocol, without depending
on any external package.
"""
from __future__ import annotations

import numpy as np

from .backprop import model_forward_cached
from .datasets import SequenceBatch, append_time_channel
from .model import model_forward, unflatten_params
from .training import ModelConfig, TrainResult, evaluate_model, train


def as_sequence_array(X, name: str = "X"):
    """Coerce input sequences to (batch, time, channels) plus lengths.

    Accepts a 3-D array (fixed length, lengths all T) or a list of 2-D
    per-sequence arrays with a shared channel count (ragged lengths are
    right-padded with zeros).
    """
    if isinstance(X, np.ndarray):
        if X.ndim != 3:
            raise ValueError(f"{name} must be 3-D (batch, time, channels), got shape {X.shape}")
        arr = np.asarray(X, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name} contains non-finite values")
        lengths = np.full(arr.shape[0], arr.shape[1], dtype=np.int64)
        return arr, lengths
    seqs = [np.asarray(s, dtype=np.float64) for s in X]
    if not seqs:
        raise ValueError(f"{name} is empty")
    for i, s in enumerate(seqs):
        if s.ndim != 2:
            raise ValueError(f"{name}[{i}] must be 2-D (time, channels), got shape {s.shape}")
        if s.shape[0] < 1:
            raise ValueError(f"{name}[{i}] has no steps")
        if s.shape[1] != seqs[0].shape[1]:
            raise ValueError(
                f"{name}[{i}] has {s.shape[1]} channels, expected {seqs[0].shape[1]}"
            )
        if not np.all(np.isfinite(s)):
            raise ValueError(f"{name}[{i}] contains non-finite values")
    n = len(seqs)
    t_max = max(s.shape[0] for s in seqs)
    arr = np.zeros((n, t_max, seqs[0].shape[1]))
    lengths = np.empty(n, dtype=np.int64)
    for i, s in enumerate(seqs):
        arr[i, : s.shape[0]] = s
        lengths[i] = s.shape[0]
    return arr, lengths


def validation_split(n: int, fraction: float, seed):
    """Seeded (train_idx, val_idx) with at least one sequence on each side."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"validation_fraction must be in (0, 1), got {fraction}")
    if n < 2:
        raise ValueError(f"need at least 2 sequences to split off validation, got {n}")
    n_val = min(max(1, int(round(fraction * n))), n - 1)
    perm = np.random.default_rng((seed, 0xA11D)).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


class _BaseEstimator:
    """get_params/set_params plumbing shared by the concrete estimators."""

    _task = ""

    def __init__(
        self,
        hidden: int = 64,
        state: int = 64,
        n_blocks: int = 2,
        scheme: str = "im",
        param_mode: str = "relu",
        init_mode: str = "uniform01",
        dt: float = 1.0,
        include_time: bool = False,
        learning_rate: float = 1e-3,
        batch_size: int = 32,
        epochs: int = 200,
        patience: int = 20,
        grad_clip: float = 0.0,
        validation_fraction: float = 0.15,
        seed: int = 0,
    ):
        self.hidden = hidden
        self.state = state
        self.n_blocks = n_blocks
        self.scheme = scheme
        self.param_mode = param_mode
        self.init_mode = init_mode
        self.dt = dt
        self.include_time = include_time
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.patience = patience
        self.grad_clip = grad_clip
        self.validation_fraction = validation_fraction
        self.seed = seed

    @classmethod
    def _param_names(cls):
        import inspect

        sig = inspect.signature(cls.__init__)
        return [p for p in sig.parameters if p != "self"]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **kwargs):
        valid = set(self._param_names())
        for key, value in kwargs.items():
            if key not in valid:
                raise ValueError(
                    f"invalid parameter {key!r} for {type(self).__name__}; "
                    f"valid parameters: {sorted(valid)}"
                )
            setattr(self, key, value)
        return self

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.get_params().items())
        return f"{type(self).__name__}({args})"

    # --- shared fit/inference machinery ---------------------------------

    def _config(self, p_in: int, out: int, extra: dict | None = None) -> ModelConfig:
        kwargs = dict(
            p_in=p_in,
            hidden=self.hidden,
            state=self.state,
            out=out,
            n_blocks=self.n_blocks,
            scheme=self.scheme,
            param_mode=self.param_mode,
            init_mode=self.init_mode,
            dt=self.dt,
            include_time=self.include_time,
            task=self._task,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            patience=self.patience,
            grad_clip=self.grad_clip,
        )
        kwargs.update(extra or {})
        return ModelConfig(**kwargs)

    def _check_fitted(self):
        if getattr(self, "result_", None) is None:
            raise RuntimeError(f"this {type(self).__name__} is not fitted yet; call fit first")

    def _prepare_inputs(self, X, fit: bool):
        arr, lengths = as_sequence_array(X)
        if fit:
            self.n_channels_in_ = arr.shape[2]
        elif arr.shape[2] != self.n_channels_in_:
            raise ValueError(
                f"X has {arr.shape[2]} channels but fit saw {self.n_channels_in_}"
            )
        return arr, lengths

    def _fit_batches(self, full: SequenceBatch):
        idx_tr, idx_va = validation_split(
            full.n_sequences, self.validation_fraction, self.seed
        )
        train_b, val_b = full.take(idx_tr), full.take(idx_va)
        if self.include_time:
            train_b = append_time_channel(train_b)
            val_b = append_time_channel(val_b)
        return train_b, val_b

    def _inference_batch(self, arr, lengths, targets=None) -> SequenceBatch:
        batch = SequenceBatch(inputs=arr, lengths=lengths, targets=targets)
        if self.include_time:
            batch = append_time_channel(batch)
        return batch

    def _forward(self, batch: SequenceBatch, chunk: int = 256) -> np.ndarray:
        params = unflatten_params(
            self.result_.params, self.result_.config.dt, self.result_.config.param_mode
        )
        outs = []
        for start in range(0, batch.n_sequences, chunk):
            part = batch.take(np.arange(start, min(start + chunk, batch.n_sequences)))
            outs.append(model_forward(params, self.result_.config.scheme, part.inputs))
        return np.concatenate(outs, axis=0)

    def transform(self, X) -> np.ndarray:
        """Sequence features: the stack's output before the decoder layer."""
        self._check_fitted()
        arr, lengths = self._prepare_inputs(X, fit=False)
        batch = self._inference_batch(arr, lengths)
        params = unflatten_params(
            self.result_.params, self.result_.config.dt, self.result_.config.param_mode
        )
        _, cache = model_forward_cached(params, self.result_.config.scheme, batch.inputs)
        return cache.final

    def fit_transform(self, X, y=None):
        return self.fit(X, y).transform(X)


class LinossClassifier(_BaseEstimator):
    """Sequence classifier reading the last valid step of the stack."""

    _task = "classify"

    def fit(self, X, y):
        arr, lengths = self._prepare_inputs(X, fit=True)
        y = np.asarray(y)
        if y.shape != (arr.shape[0],):
            raise ValueError(f"y must have shape ({arr.shape[0]},), got {y.shape}")
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least 2 classes")
        full = SequenceBatch(
            inputs=arr, lengths=lengths, targets=encoded.astype(np.int64)
        )
        train_b, val_b = self._fit_batches(full)
        config = self._config(train_b.n_channels, len(self.classes_))
        self.result_: TrainResult = train(config, (train_b, val_b, None))
        return self

    def decision_function(self, X) -> np.ndarray:
        self._check_fitted()
        arr, lengths = self._prepare_inputs(X, fit=False)
        batch = self._inference_batch(arr, lengths)
        outputs = self._forward(batch)
        return outputs[np.arange(batch.n_sequences), batch.lengths - 1]

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]

    def score(self, X, y) -> float:
        return float((self.predict(X) == np.asarray(y)).mean())


class LinossRegressor(_BaseEstimator):
    """Sequence regressor; per-step targets (n, T, k) or per-sequence (n, k)."""

    _task = "regress"

    def fit(self, X, y):
        arr, lengths = self._prepare_inputs(X, fit=True)
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 3:
            if y.shape[:2] != arr.shape[:2]:
                raise ValueError(
                    f"per-step y must be ({arr.shape[0]}, {arr.shape[1]}, k), got {y.shape}"
                )
        elif y.ndim == 2:
            if y.shape[0] != arr.shape[0]:
                raise ValueError(f"y has {y.shape[0]} rows for {arr.shape[0]} sequences")
        else:
            raise ValueError(f"y must be 2-D or 3-D, got {y.ndim}-D")
        self.per_step_ = y.ndim == 3
        full = SequenceBatch(inputs=arr, lengths=lengths, targets=y)
        train_b, val_b = self._fit_batches(full)
        config = self._config(train_b.n_channels, y.shape[-1])
        self.result_: TrainResult = train(config, (train_b, val_b, None))
        return self

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        arr, lengths = self._prepare_inputs(X, fit=False)
        batch = self._inference_batch(arr, lengths)
        outputs = self._forward(batch)
        if self.per_step_:
            return outputs
        return outputs[np.arange(batch.n_sequences), batch.lengths - 1]

    def score(self, X, y) -> float:
        """Coefficient of determination over all target entries."""
        y = np.asarray(y, dtype=np.float64)
        pred = self.predict(X)
        if pred.shape != y.shape:
            raise ValueError(f"prediction shape {pred.shape} != target shape {y.shape}")
        ss_res = float(np.sum((y - pred) ** 2))
        ss_tot = float(np.sum((y - y.mean()) ** 2))
        if ss_tot == 0.0:
            return 1.0 if ss_res == 0.0 else 0.0
        return 1.0 - ss_res / ss_tot


class LinossForecaster(_BaseEstimator):
    """Self-supervised forecaster: sees the first l1 steps, predicts the
    next l2 steps of every channel."""

    _task = "forecast"

    def __init__(self, l1: int = 1, l2: int = 1, **kwargs):
        super().__init__(**kwargs)
        self.l1 = l1
        self.l2 = l2

    @classmethod
    def _param_names(cls):
        return ["l1", "l2"] + _BaseEstimator._param_names()

    def fit(self, X, y=None):
        if y is not None:
            raise ValueError("the forecaster is self-supervised; y must be None")
        arr, lengths = self._prepare_inputs(X, fit=True)
        if arr.shape[1] != self.l1 + self.l2:
            raise ValueError(
                f"sequences have {arr.shape[1]} steps but l1 + l2 = {self.l1 + self.l2}"
            )
        # self-targets are the raw channels; the training loop applies the
        # horizon mask after any time channel so every channel is zeroed
        full = SequenceBatch(inputs=arr, lengths=lengths, targets=arr.copy())
        train_b, val_b = self._fit_batches(full)
        config = self._config(
            train_b.n_channels,
            arr.shape[2],
            extra={"forecast_l1": self.l1, "forecast_l2": self.l2},
        )
        self.result_: TrainResult = train(config, (train_b, val_b, None))
        return self

    def _masked_batch(self, X) -> SequenceBatch:
        arr, lengths = self._prepare_inputs(X, fit=False)
        if arr.shape[1] == self.l1:
            pad = np.zeros((arr.shape[0], self.l2, arr.shape[2]))
            arr = np.concatenate([arr, pad], axis=1)
        elif arr.shape[1] != self.l1 + self.l2:
            raise ValueError(
                f"sequences must have l1 = {self.l1} or l1 + l2 = {self.l1 + self.l2} "
                f"steps, got {arr.shape[1]}"
            )
        if not np.all(lengths == lengths[0]):
            raise ValueError("forecasting needs fixed-length sequences")
        full_len = np.full(arr.shape[0], self.l1 + self.l2, dtype=np.int64)
        batch = SequenceBatch(inputs=arr, lengths=full_len)
        if self.include_time:
            batch = append_time_channel(batch)
        masked = batch.inputs.copy()
        masked[:, self.l1 :, :] = 0.0
        return SequenceBatch(
            inputs=masked, lengths=full_len, forecast_split=(self.l1, self.l2)
        )

    def predict(self, X) -> np.ndarray:
        """Forecast the masked horizon; X may carry l1 or l1+l2 steps."""
        self._check_fitted()
        batch = self._masked_batch(X)
        outputs = self._forward(batch)
        return outputs[:, self.l1 : self.l1 + self.l2]

    def score(self, X) -> float:
        """Negative mean squared error over the forecast horizon."""
        arr, _ = as_sequence_array(X)
        if arr.shape[1] != self.l1 + self.l2:
            raise ValueError("scoring needs full sequences of l1 + l2 steps")
        pred = self.predict(X)
        truth = arr[:, self.l1 :]
        return -float(np.mean((pred - truth) ** 2))
