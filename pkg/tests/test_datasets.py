"""Data module tests: generators, oracles, CSV round trips, splits."""
from __future__ import annotations

import numpy as np
import pytest

from linoss.datasets import (
    DatasetSpec,
    SequenceBatch,
    append_time_channel,
    apply_forecast_mask,
    gen_harmonic,
    load_csv,
    load_dataset_dir,
    sine_transform_oracle,
    split_counts,
    split_indices,
    write_dataset_dir,
)


class TestHarmonic:
    def test_shapes_and_split_sizes(self):
        train, val, test = gen_harmonic(20, 5, 5, steps=50, seed=1)
        assert train.inputs.shape == (20, 50, 2)
        assert val.inputs.shape == (5, 50, 2)
        assert test.targets.shape == (5, 50, 1)
        assert np.all(train.lengths == 50)

    def test_inputs_are_constant_amplitudes(self):
        train, _, _ = gen_harmonic(4, 1, 1, steps=30, seed=2)
        assert np.all(train.inputs == train.inputs[:, :1, :])
        assert np.all(train.inputs >= 0.0) and np.all(train.inputs <= 1.0)

    def test_trajectory_is_harmonic(self):
        # the three-term recurrence y(t+dt) = 2 cos(dt) y(t) - y(t-dt) holds
        # for any A cos t + B sin t; a grid-level identity independent of A, B
        dt = 0.1
        train, _, _ = gen_harmonic(6, 1, 1, dt=dt, steps=200, seed=3)
        y = train.targets[:, :, 0]
        lhs = y[:, 2:]
        rhs = 2.0 * np.cos(dt) * y[:, 1:-1] - y[:, :-2]
        assert np.max(np.abs(lhs - rhs)) < 1e-10

    def test_first_sample_matches_amplitudes(self):
        dt = 0.1
        train, _, _ = gen_harmonic(5, 1, 1, dt=dt, steps=10, seed=4)
        a = train.inputs[:, 0, 0]
        b = train.inputs[:, 0, 1]
        want = a * np.cos(dt) + b * np.sin(dt)
        assert np.max(np.abs(train.targets[:, 0, 0] - want)) < 1e-12

    def test_energy_identity(self):
        dt = 0.05
        train, _, _ = gen_harmonic(8, 1, 1, dt=dt, steps=400, seed=5)
        a = train.inputs[:, :1, 0]
        b = train.inputs[:, :1, 1]
        t = dt * np.arange(1, 401)
        y = train.targets[:, :, 0]
        y_prime = -a * np.sin(t) + b * np.cos(t)
        energy = y * y + y_prime * y_prime
        assert np.max(np.abs(energy - (a * a + b * b))) < 1e-10

    def test_determinism(self):
        x = gen_harmonic(3, 1, 1, steps=20, seed=9)[0]
        y = gen_harmonic(3, 1, 1, steps=20, seed=9)[0]
        assert np.array_equal(x.inputs, y.inputs)
        assert np.array_equal(x.targets, y.targets)

    def test_invalid_args(self):
        with pytest.raises(ValueError):
            gen_harmonic(0, 1, 1)
        with pytest.raises(ValueError, match="dt"):
            gen_harmonic(1, 1, 1, dt=0.0)


class TestSineOracle:
    def test_zero_signal(self):
        t = 0.01 * np.arange(100)
        assert np.all(sine_transform_oracle(np.zeros(100), 1.0, t) == 0.0)

    def test_constant_signal_analytic(self):
        # u = 1, A = 1: integral of sin over [0, t] = 1 - cos t
        t = 1e-3 * np.arange(3001)
        got = sine_transform_oracle(np.ones_like(t), 1.0, t)
        assert np.max(np.abs(got - (1.0 - np.cos(t)))) < 1e-6

    def test_second_order_convergence(self):
        def err(h):
            t = h * np.arange(int(round(4.0 / h)) + 1)
            got = sine_transform_oracle(np.ones_like(t), 1.0, t)
            return np.max(np.abs(got - (1.0 - np.cos(t))))

        ratio = err(2e-3) / err(1e-3)
        assert 3.5 <= ratio <= 4.5

    def test_grid_validation(self):
        with pytest.raises(ValueError, match="uniform"):
            sine_transform_oracle(np.ones(3), 1.0, np.array([0.0, 0.1, 0.3]))
        with pytest.raises(ValueError, match="starting at 0"):
            sine_transform_oracle(np.ones(3), 1.0, np.array([1.0, 1.1, 1.2]))
        with pytest.raises(ValueError, match="matching"):
            sine_transform_oracle(np.ones(3), 1.0, np.zeros(4))


class TestSplits:
    def test_documented_example(self):
        assert split_counts(10, (0.7, 0.15, 0.15)) == (7, 1, 2)

    def test_exact_fractions(self):
        assert split_counts(100, (0.7, 0.15, 0.15)) == (70, 15, 15)

    def test_tiny_n(self):
        assert split_counts(1, (0.7, 0.15, 0.15)) == (1, 0, 0)
        # 1.4/0.3/0.3: the leftover seat follows the largest remainder 0.4
        assert split_counts(2, (0.7, 0.15, 0.15)) == (2, 0, 0)

    def test_counts_always_sum(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(1, 500))
            f = rng.dirichlet(np.ones(3))
            counts = split_counts(n, tuple(f))
            assert sum(counts) == n
            assert all(c >= 0 for c in counts)

    def test_indices_disjoint_exhaustive_deterministic(self):
        a = split_indices(37, (0.7, 0.15, 0.15), seed=5)
        b = split_indices(37, (0.7, 0.15, 0.15), seed=5)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)
        merged = np.concatenate(a)
        assert sorted(merged) == list(range(37))
        assert split_counts(37, (0.7, 0.15, 0.15)) == tuple(len(x) for x in a)


def small_batch(n=10, t=6, c=2, seed=0, labels=False):
    rng = np.random.default_rng(seed)
    targets = rng.integers(0, 3, n) if labels else rng.normal(size=(n, t, 1))
    return SequenceBatch(
        inputs=rng.normal(size=(n, t, c)),
        lengths=np.full(n, t),
        targets=targets,
    )


class TestCsvRoundTrip:
    def test_regression_bit_identical(self, tmp_path):
        splits = gen_harmonic(8, 2, 2, steps=7, seed=1)
        write_dataset_dir(str(tmp_path), splits, "regress", seed=1)
        spec = DatasetSpec(task="regress", normalization="none")
        train, val, test = load_dataset_dir(str(tmp_path), spec)
        for orig, got in zip(splits, (train, val, test)):
            assert np.array_equal(orig.inputs, got.inputs)
            assert np.array_equal(orig.targets, got.targets)
            assert np.array_equal(orig.lengths, got.lengths)

    def test_metadata_sidecar(self, tmp_path):
        write_dataset_dir(str(tmp_path), gen_harmonic(2, 1, 1, steps=3), "regress", seed=7)
        text = (tmp_path / "metadata.txt").read_text()
        assert "task=regress" in text
        assert "channels=2" in text
        assert "length=3" in text
        assert "seed=7" in text

    def test_classification_labels(self, tmp_path):
        batch = small_batch(labels=True)
        write_dataset_dir(str(tmp_path), (batch, batch, batch), "classify", seed=0)
        spec = DatasetSpec(task="classify", normalization="none")
        train, _, _ = load_dataset_dir(str(tmp_path), spec)
        assert train.targets.dtype == np.int64
        assert np.array_equal(train.targets, batch.targets)

    def test_single_file_split(self, tmp_path):
        from linoss.datasets import _write_csv

        batch = small_batch(n=10)
        _write_csv(str(tmp_path / "data.csv"), batch, "regress")
        spec = DatasetSpec(task="regress", normalization="none", seed=3)
        train, val, test = load_csv(str(tmp_path / "data.csv"), spec)
        assert (train.n_sequences, val.n_sequences, test.n_sequences) == (7, 1, 2)
        again = load_csv(str(tmp_path / "data.csv"), spec)
        assert np.array_equal(train.inputs, again[0].inputs)

    def test_missing_layout(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="train.csv"):
            load_dataset_dir(str(tmp_path), DatasetSpec(task="regress"))


class TestCsvErrors:
    def write(self, tmp_path, text):
        path = tmp_path / "data.csv"
        path.write_text(text)
        return str(path)

    def test_ragged_row_names_line(self, tmp_path):
        path = self.write(
            tmp_path,
            "seq_id,step,ch_0\n0,0,1.0\n0,1\n",
        )
        with pytest.raises(ValueError, match=":3:"):
            load_csv(path, DatasetSpec(task="regress"))

    def test_non_numeric_cell(self, tmp_path):
        path = self.write(tmp_path, "seq_id,step,ch_0\n0,0,abc\n")
        with pytest.raises(ValueError, match="non-numeric"):
            load_csv(path, DatasetSpec(task="regress"))

    def test_classify_needs_label(self, tmp_path):
        path = self.write(tmp_path, "seq_id,step,ch_0\n0,0,1.0\n")
        with pytest.raises(ValueError, match="label"):
            load_csv(path, DatasetSpec(task="classify"))

    def test_conflicting_labels(self, tmp_path):
        path = self.write(
            tmp_path,
            "seq_id,step,ch_0,label\n0,0,1.0,1\n0,1,2.0,2\n",
        )
        with pytest.raises(ValueError, match="conflicting"):
            load_csv(path, DatasetSpec(task="classify"))

    def test_bad_header(self, tmp_path):
        path = self.write(tmp_path, "a,b,c\n1,2,3\n")
        with pytest.raises(ValueError, match="header"):
            load_csv(path, DatasetSpec(task="regress"))

    def test_empty_file(self, tmp_path):
        path = self.write(tmp_path, "")
        with pytest.raises(ValueError, match="empty"):
            load_csv(path, DatasetSpec(task="regress"))

    def test_non_contiguous_steps(self, tmp_path):
        path = self.write(tmp_path, "seq_id,step,ch_0\n0,0,1.0\n0,2,2.0\n")
        with pytest.raises(ValueError, match="contiguous"):
            load_csv(path, DatasetSpec(task="regress"))

    def test_unknown_extra_column(self, tmp_path):
        path = self.write(tmp_path, "seq_id,step,ch_0,bogus\n0,0,1.0,2.0\n")
        with pytest.raises(ValueError, match="unrecognized"):
            load_csv(path, DatasetSpec(task="regress"))


class TestNormalization:
    def test_train_split_stats(self, tmp_path):
        from linoss.datasets import _write_csv

        batch = small_batch(n=20, t=8, c=3, seed=4)
        _write_csv(str(tmp_path / "data.csv"), batch, "regress")
        spec = DatasetSpec(task="regress", normalization="zscore", seed=0)
        train, _, _ = load_csv(str(tmp_path / "data.csv"), spec)
        flat = train.inputs.reshape(-1, 3)
        assert np.max(np.abs(flat.mean(axis=0))) < 1e-12
        assert np.max(np.abs(flat.std(axis=0) - 1.0)) < 1e-12

    def test_mask_awareness(self):
        from linoss.datasets import _apply_zscore, _zscore_stats

        rng = np.random.default_rng(8)
        inputs = rng.normal(size=(5, 6, 2)) + 4.0
        lengths = np.array([6, 4, 3, 6, 2])
        mask = np.arange(6) < lengths[:, None]
        inputs[~mask] = 0.0
        batch = SequenceBatch(inputs=inputs, lengths=lengths)
        mean, std = _zscore_stats(batch)
        assert np.max(np.abs(mean - inputs[mask].mean(axis=0))) < 1e-12
        normed = _apply_zscore(batch, mean, std)
        # padding survives untouched, valid positions are standardized
        assert np.all(normed.inputs[~mask] == 0.0)
        assert np.max(np.abs(normed.inputs[mask].mean(axis=0))) < 1e-12

    def test_constant_channel_does_not_blow_up(self):
        inputs = np.ones((4, 5, 1))
        batch = SequenceBatch(inputs=inputs, lengths=np.full(4, 5))
        from linoss.datasets import _apply_zscore, _zscore_stats

        mean, std = _zscore_stats(batch)
        normed = _apply_zscore(batch, mean, std)
        assert np.all(np.isfinite(normed.inputs))
        assert np.all(normed.inputs == 0.0)


class TestTimeChannel:
    def test_length_two_ramp(self):
        batch = SequenceBatch(inputs=np.zeros((1, 2, 1)), lengths=np.array([2]))
        out = append_time_channel(batch)
        assert np.allclose(out.inputs[0, :, 1], [0.0, 1.0], atol=1e-15)

    def test_padding_stays_zero(self):
        batch = SequenceBatch(inputs=np.zeros((2, 5, 1)), lengths=np.array([3, 5]))
        out = append_time_channel(batch)
        assert np.allclose(out.inputs[0, :3, 1], [0.0, 0.5, 1.0], atol=1e-15)
        assert np.all(out.inputs[0, 3:, 1] == 0.0)

    def test_length_one(self):
        batch = SequenceBatch(inputs=np.zeros((1, 3, 1)), lengths=np.array([1]))
        out = append_time_channel(batch)
        assert np.all(out.inputs[0, :, 1] == 0.0)

    def test_not_idempotent_by_design(self):
        batch = SequenceBatch(inputs=np.zeros((1, 4, 1)), lengths=np.array([4]))
        out = append_time_channel(append_time_channel(batch))
        assert out.n_channels == 3


class TestForecastMask:
    def test_basic(self):
        batch = small_batch(n=3, t=10)
        out = apply_forecast_mask(batch, 6, 4)
        assert np.all(out.inputs[:, 6:, :] == 0.0)
        assert np.array_equal(out.inputs[:, :6, :], batch.inputs[:, :6, :])
        assert np.array_equal(out.targets, batch.targets[:, 6:, :])
        assert out.forecast_split == (6, 4)

    def test_l2_zero_unchanged(self):
        batch = small_batch(n=2, t=5)
        out = apply_forecast_mask(batch, 5, 0)
        assert np.array_equal(out.inputs, batch.inputs)

    def test_l1_zero_fully_masked(self):
        batch = small_batch(n=2, t=5)
        out = apply_forecast_mask(batch, 0, 5)
        assert np.all(out.inputs == 0.0)
        assert np.array_equal(out.targets, batch.targets)

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="l1\\+l2"):
            apply_forecast_mask(small_batch(t=5), 3, 3)

    def test_needs_per_step_targets(self):
        batch = small_batch(t=6, labels=True)
        with pytest.raises(ValueError, match="per-step"):
            apply_forecast_mask(batch, 3, 3)

    def test_self_targets_from_loader(self, tmp_path):
        from linoss.datasets import _write_csv

        rng = np.random.default_rng(3)
        batch = SequenceBatch(
            inputs=rng.normal(size=(10, 6, 2)), lengths=np.full(10, 6)
        )
        _write_csv(str(tmp_path / "data.csv"), batch, "forecast")
        spec = DatasetSpec(task="forecast", include_time=True, seed=1)
        train, _, _ = load_csv(str(tmp_path / "data.csv"), spec)
        # targets mirror the normalized signal channels, no time channel
        assert train.targets.shape == (7, 6, 2)
        assert np.array_equal(train.targets, train.inputs[:, :, :2])
        assert train.n_channels == 3


class TestBatchValidation:
    def test_bad_lengths(self):
        with pytest.raises(ValueError, match="lengths"):
            SequenceBatch(inputs=np.zeros((2, 3, 1)), lengths=np.array([3]))
        with pytest.raises(ValueError, match="lengths"):
            SequenceBatch(inputs=np.zeros((2, 3, 1)), lengths=np.array([3, 4]))

    def test_bad_inputs_rank(self):
        with pytest.raises(ValueError, match="sequences"):
            SequenceBatch(inputs=np.zeros((2, 3)), lengths=np.array([3, 3]))

    def test_target_kind(self):
        assert small_batch(labels=True).target_kind == "labels"
        assert small_batch().target_kind == "steps"
        b = SequenceBatch(
            inputs=np.zeros((2, 3, 1)),
            lengths=np.array([3, 3]),
            targets=np.zeros((2, 4)),
        )
        assert b.target_kind == "vector"

    def test_spec_validation(self):
        with pytest.raises(ValueError, match="task"):
            DatasetSpec(task="cluster")
        with pytest.raises(ValueError, match="sum to 1"):
            DatasetSpec(task="regress", split=(0.5, 0.2, 0.2))
        with pytest.raises(ValueError, match="normalization"):
            DatasetSpec(task="regress", normalization="minmax")
