"""Dataset generation, analytic oracles, and CSV ingestion.

File format for on-disk datasets: one CSV per split with header
``seq_id,step,ch_0..ch_{c-1}[,label|target_0..]``, rows sorted by
(seq_id, step), plus a sidecar ``metadata.txt`` of ``key=value`` lines
(task, channels, length, seed).  Values are written with 17 significant
digits so a write/read round trip is bit-identical.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace

import numpy as np

from .validation import check_positive_int

__all__ = [
    "SequenceBatch",
    "DatasetSpec",
    "gen_harmonic",
    "sine_transform_oracle",
    "split_counts",
    "split_indices",
    "load_csv",
    "write_dataset_dir",
    "load_dataset_dir",
    "append_time_channel",
    "apply_forecast_mask",
]

TASKS = ("classify", "regress", "forecast")
NORMALIZATIONS = ("none", "zscore")


@dataclass(frozen=True)
class SequenceBatch:
    """A batch of right-padded sequences with per-sequence true lengths.

    targets is one of: None; an integer vector of class labels (n,);
    a per-sequence real matrix (n, k); or a per-step real array
    (n, window, k) where window is the full length, or l2 once a forecast
    mask has restricted the targets.
    """

    inputs: np.ndarray
    lengths: np.ndarray
    targets: np.ndarray | None = None
    forecast_split: tuple[int, int] | None = None

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        if inputs.ndim != 3:
            raise ValueError("inputs must be (sequences, time, channels)")
        lengths = np.asarray(self.lengths)
        if lengths.shape != (inputs.shape[0],):
            raise ValueError("lengths must have one entry per sequence")
        lengths = lengths.astype(np.int64)
        if inputs.shape[0] and (lengths.min() < 1 or lengths.max() > inputs.shape[1]):
            raise ValueError("lengths must lie in [1, time dimension]")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "lengths", lengths)
        if self.targets is not None:
            targets = np.asarray(self.targets)
            if targets.ndim == 1:
                targets = targets.astype(np.int64)
            else:
                targets = targets.astype(np.float64)
            if targets.shape[0] != inputs.shape[0]:
                raise ValueError("targets must have one entry per sequence")
            if targets.ndim not in (1, 2, 3):
                raise ValueError("targets must be labels, vectors, or per-step arrays")
            object.__setattr__(self, "targets", targets)

    @property
    def n_sequences(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_steps(self) -> int:
        return self.inputs.shape[1]

    @property
    def n_channels(self) -> int:
        return self.inputs.shape[2]

    @property
    def target_kind(self) -> str:
        if self.targets is None:
            return "none"
        return {1: "labels", 2: "vector", 3: "steps"}[self.targets.ndim]

    def take(self, idx) -> "SequenceBatch":
        """Row subset, preserving target kind and forecast bookkeeping."""
        targets = None if self.targets is None else self.targets[idx]
        return SequenceBatch(
            inputs=self.inputs[idx],
            lengths=self.lengths[idx],
            targets=targets,
            forecast_split=self.forecast_split,
        )


@dataclass(frozen=True)
class DatasetSpec:
    """How a raw file becomes train/val/test batches."""

    task: str
    normalization: str = "zscore"
    include_time: bool = False
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {self.normalization!r}")
        split = tuple(float(f) for f in self.split)
        if len(split) != 3 or any(f < 0 for f in split):
            raise ValueError("split must be three nonnegative fractions")
        if abs(sum(split) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(split)}")
        object.__setattr__(self, "split", split)


def gen_harmonic(
    n_train: int = 2000,
    n_val: int = 500,
    n_test: int = 500,
    dt: float = 0.1,
    steps: int = 1000,
    seed=0,
) -> tuple[SequenceBatch, SequenceBatch, SequenceBatch]:
    """Simple-harmonic-motion regression data.

    Each sequence draws amplitudes A, B ~ U([0,1]) and exposes them as two
    constant input channels; the per-step target is the closed-form
    trajectory y(t) = A cos t + B sin t sampled at t = dt*(1..steps).
    Generation is analytic, so the energy y^2 + y'^2 = A^2 + B^2 holds to
    rounding.
    """
    for name, v in (("n_train", n_train), ("n_val", n_val), ("n_test", n_test), ("steps", steps)):
        check_positive_int(v, name)
    if dt <= 0:
        raise ValueError("dt must be positive")
    rng = np.random.default_rng(seed)
    total = n_train + n_val + n_test
    ab = rng.uniform(0.0, 1.0, (total, 2))
    t = dt * np.arange(1, steps + 1)
    traj = ab[:, :1] * np.cos(t) + ab[:, 1:] * np.sin(t)
    inputs = np.broadcast_to(ab[:, None, :], (total, steps, 2)).copy()
    lengths = np.full(total, steps, dtype=np.int64)

    def cut(lo, hi):
        return SequenceBatch(
            inputs=inputs[lo:hi],
            lengths=lengths[lo:hi],
            targets=traj[lo:hi, :, None],
        )

    return cut(0, n_train), cut(n_train, n_train + n_val), cut(n_train + n_val, total)


def sine_transform_oracle(u, a_freq: float, t_grid) -> np.ndarray:
    """Trapezoidal quadrature of integral of u(t - s) sin(a_freq s) ds, s in [0, t].

    u holds samples of the signal on t_grid, which must be uniform and start
    at 0.  Returns the integral value at every grid time.
    """
    u = np.asarray(u, dtype=np.float64)
    t_grid = np.asarray(t_grid, dtype=np.float64)
    if u.shape != t_grid.shape or u.ndim != 1:
        raise ValueError("u and t_grid must be matching 1-D arrays")
    if t_grid.shape[0] < 2:
        return np.zeros_like(u)
    h = t_grid[1] - t_grid[0]
    if abs(t_grid[0]) > 1e-12 or np.max(np.abs(np.diff(t_grid) - h)) > 1e-9 * abs(h):
        raise ValueError("t_grid must be uniformly spaced starting at 0")
    s = np.sin(a_freq * t_grid)
    conv = np.convolve(u, s)[: u.shape[0]]
    # trapezoid halves the two endpoint terms of each prefix sum
    return h * (conv - 0.5 * (u * s[0] + u[0] * s))


def split_counts(n: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    """Largest-remainder apportionment of n items across three fractions.

    Ties on fractional parts go to the later split, so (0.7, 0.15, 0.15)
    over 10 items yields (7, 1, 2).
    """
    exact = np.asarray(fractions, dtype=np.float64) * n
    base = np.floor(exact).astype(np.int64)
    frac = exact - base
    short = n - int(base.sum())
    order = sorted(range(3), key=lambda i: (frac[i], i), reverse=True)
    for i in order[:short]:
        base[i] += 1
    return int(base[0]), int(base[1]), int(base[2])


def split_indices(n: int, fractions, seed) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Disjoint, exhaustive index sets from a seeded permutation."""
    n_train, n_val, _ = split_counts(n, tuple(fractions))
    perm = np.random.default_rng(seed).permutation(n)
    return perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]


def _zscore_stats(batch: SequenceBatch) -> tuple[np.ndarray, np.ndarray]:
    mask = np.arange(batch.n_steps) < batch.lengths[:, None]
    valid = batch.inputs[mask]
    mean = valid.mean(axis=0)
    std = valid.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    return mean, std


def _apply_zscore(batch: SequenceBatch, mean, std) -> SequenceBatch:
    mask = np.arange(batch.n_steps) < batch.lengths[:, None]
    inputs = batch.inputs.copy()
    inputs[mask] = (inputs[mask] - mean) / std
    return replace(batch, inputs=inputs)


def append_time_channel(batch: SequenceBatch) -> SequenceBatch:
    """Append a ramp channel 0..1 over each sequence's true length.

    Padding positions get 0.  Not idempotent: calling twice appends two
    channels.
    """
    n, t_dim, _ = batch.inputs.shape
    steps = np.arange(t_dim, dtype=np.float64)
    denom = np.maximum(batch.lengths - 1, 1).astype(np.float64)
    ramp = steps / denom[:, None]
    ramp[batch.lengths == 1, 0] = 0.0
    ramp[steps >= batch.lengths[:, None]] = 0.0
    inputs = np.concatenate([batch.inputs, ramp[:, :, None]], axis=2)
    return replace(batch, inputs=inputs)


def apply_forecast_mask(batch: SequenceBatch, l1: int, l2: int) -> SequenceBatch:
    """Zero the inputs on steps [l1, l1+l2) and restrict targets to them."""
    if l1 < 0 or l2 < 0:
        raise ValueError("window lengths must be nonnegative")
    if batch.n_steps != l1 + l2:
        raise ValueError(
            f"sequence length {batch.n_steps} does not equal l1+l2 = {l1 + l2}"
        )
    if l2 == 0:
        return replace(batch, forecast_split=(l1, l2))
    if batch.target_kind != "steps":
        raise ValueError("forecast masking needs per-step targets")
    inputs = batch.inputs.copy()
    inputs[:, l1:, :] = 0.0
    return SequenceBatch(
        inputs=inputs,
        lengths=batch.lengths,
        targets=batch.targets[:, l1 : l1 + l2, :],
        forecast_split=(l1, l2),
    )


def _parse_cell(text: str, path: str, line_no: int):
    try:
        return float(text)
    except ValueError:
        raise ValueError(
            f"{path}:{line_no}: non-numeric cell {text!r}"
        ) from None


def _read_rows(path: str, task: str):
    """Parse one CSV into (inputs, lengths, targets) arrays."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if header[:2] != ["seq_id", "step"]:
            raise ValueError(f"{path}: header must start with seq_id,step")
        channel_cols = [c for c in header[2:] if c.startswith("ch_")]
        extra = header[2 + len(channel_cols) :]
        if len(channel_cols) == 0:
            raise ValueError(f"{path}: no channel columns")
        has_label = extra == ["label"]
        target_cols = [c for c in extra if c.startswith("target_")]
        if not has_label and len(target_cols) != len(extra):
            raise ValueError(f"{path}: unrecognized columns {extra}")
        if task == "classify" and not has_label:
            raise ValueError(f"{path}: task 'classify' needs a label column")
        width = len(header)

        seq_rows: dict[int, list] = {}
        seq_labels: dict[int, int] = {}
        for line_no, row in enumerate(reader, start=2):
            if len(row) != width:
                raise ValueError(
                    f"{path}:{line_no}: expected {width} cells, got {len(row)}"
                )
            seq_id = int(_parse_cell(row[0], path, line_no))
            step = int(_parse_cell(row[1], path, line_no))
            values = [_parse_cell(c, path, line_no) for c in row[2:]]
            rows = seq_rows.setdefault(seq_id, [])
            if step != len(rows):
                raise ValueError(
                    f"{path}:{line_no}: steps of sequence {seq_id} must be "
                    f"contiguous from 0; got {step} after {len(rows)}"
                )
            if has_label:
                label = int(values[-1])
                if seq_id in seq_labels and seq_labels[seq_id] != label:
                    raise ValueError(
                        f"{path}:{line_no}: sequence {seq_id} has conflicting labels"
                    )
                seq_labels[seq_id] = label
                values = values[:-1]
            rows.append(values)

    if not seq_rows:
        raise ValueError(f"{path}: no data rows")
    ids = sorted(seq_rows)
    n, c = len(ids), len(channel_cols)
    k = len(target_cols)
    t_max = max(len(seq_rows[i]) for i in ids)
    inputs = np.zeros((n, t_max, c + k))
    lengths = np.zeros(n, dtype=np.int64)
    for row_i, seq_id in enumerate(ids):
        block = np.asarray(seq_rows[seq_id])
        inputs[row_i, : block.shape[0]] = block
        lengths[row_i] = block.shape[0]
    targets = None
    if has_label:
        targets = np.asarray([seq_labels[i] for i in ids], dtype=np.int64)
    elif k:
        targets = inputs[:, :, c:].copy()
    return inputs[:, :, :c].copy(), lengths, targets


def _finalize(batch: SequenceBatch, spec: DatasetSpec, mean, std) -> SequenceBatch:
    if spec.normalization == "zscore":
        batch = _apply_zscore(batch, mean, std)
    if spec.task == "forecast" and batch.targets is None:
        batch = replace(batch, targets=batch.inputs.copy())
    if spec.include_time:
        batch = append_time_channel(batch)
    return batch


def load_csv(path: str, spec: DatasetSpec):
    """Load one CSV and split it into (train, val, test) batches.

    The split permutation is drawn from spec.seed; normalization statistics
    come from the train split alone; forecast tasks without target columns
    predict their own (normalized) input channels.
    """
    inputs, lengths, targets = _read_rows(path, spec.task)
    full = SequenceBatch(inputs=inputs, lengths=lengths, targets=targets)
    idx_tr, idx_va, idx_te = split_indices(full.n_sequences, spec.split, spec.seed)
    parts = [full.take(i) for i in (idx_tr, idx_va, idx_te)]
    mean = std = None
    if spec.normalization == "zscore":
        mean, std = _zscore_stats(parts[0])
    train, val, test = (_finalize(p, spec, mean, std) for p in parts)
    return train, val, test


def _write_csv(path: str, batch: SequenceBatch, task: str) -> None:
    n_ch = batch.n_channels
    header = ["seq_id", "step"] + [f"ch_{i}" for i in range(n_ch)]
    kind = batch.target_kind
    if kind == "labels":
        header.append("label")
    elif kind == "steps":
        header += [f"target_{i}" for i in range(batch.targets.shape[2])]
    elif kind == "vector":
        raise ValueError("per-sequence vector targets have no CSV representation")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for s in range(batch.n_sequences):
            for t in range(int(batch.lengths[s])):
                row = [str(s), str(t)]
                row += [format(v, ".17g") for v in batch.inputs[s, t]]
                if kind == "labels":
                    row.append(str(int(batch.targets[s])))
                elif kind == "steps":
                    row += [format(v, ".17g") for v in batch.targets[s, t]]
                writer.writerow(row)


def write_dataset_dir(out_dir: str, splits, task: str, seed) -> None:
    """Write train/val/test CSVs plus the metadata sidecar."""
    os.makedirs(out_dir, exist_ok=True)
    train, val, test = splits
    for name, batch in (("train", train), ("val", val), ("test", test)):
        _write_csv(os.path.join(out_dir, f"{name}.csv"), batch, task)
    meta = {
        "task": task,
        "channels": train.n_channels,
        "length": train.n_steps,
        "seed": seed,
    }
    with open(os.path.join(out_dir, "metadata.txt"), "w", encoding="utf-8") as fh:
        for key, value in meta.items():
            fh.write(f"{key}={value}\n")


def load_dataset_dir(data_dir: str, spec: DatasetSpec):
    """Load a dataset directory into (train, val, test) batches.

    Two layouts are accepted: pre-split train.csv/val.csv/test.csv files
    (loaded verbatim, normalized with train statistics), or a single
    data.csv that is split by spec.
    """
    triple = [os.path.join(data_dir, f"{n}.csv") for n in ("train", "val", "test")]
    single = os.path.join(data_dir, "data.csv")
    if all(os.path.exists(p) for p in triple):
        parts = []
        for path in triple:
            inputs, lengths, targets = _read_rows(path, spec.task)
            parts.append(SequenceBatch(inputs=inputs, lengths=lengths, targets=targets))
        mean = std = None
        if spec.normalization == "zscore":
            mean, std = _zscore_stats(parts[0])
        train, val, test = (_finalize(p, spec, mean, std) for p in parts)
        return train, val, test
    if os.path.exists(single):
        return load_csv(single, spec)
    raise FileNotFoundError(
        f"{data_dir}: expected train.csv/val.csv/test.csv or data.csv"
    )
