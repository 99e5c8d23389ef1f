import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vmfhash import data as dm
from vmfhash.errors import DomainError, FormatError


def small_ds(rng, n_per=5, C=3, D=2, T=7):
    labels = np.repeat(np.arange(1, C + 1), n_per)
    return dm.TimeSeriesDataset(rng.normal(size=(labels.size, D, T)), labels)


# ---------------------------------------------------------------------------
# dataset type


def test_dataset_validation(rng):
    with pytest.raises(DomainError):
        dm.TimeSeriesDataset(np.zeros((2, 3)), [1, 2])
    with pytest.raises(DomainError):
        dm.TimeSeriesDataset(np.zeros((2, 1, 3)), [1, 3])
    with pytest.raises(DomainError):
        dm.TimeSeriesDataset(np.zeros((2, 1, 3)), [0, 1])
    bad = np.zeros((2, 1, 3))
    bad[0, 0, 0] = np.nan
    with pytest.raises(DomainError):
        dm.TimeSeriesDataset(bad, [1, 1])
    ds = small_ds(rng)
    assert (ds.n, ds.channels, ds.length, ds.num_classes) == (15, 2, 7, 3)


# ---------------------------------------------------------------------------
# file format


def test_round_trip_is_value_exact(tmp_path, rng):
    ds = small_ds(rng)
    ds = dm.TimeSeriesDataset(ds.values * 1e-7 + np.pi, ds.labels)
    path = tmp_path / "d.vmfts"
    dm.save_dataset(ds, path, {"origin": "test"})
    back = dm.load_dataset(path)
    assert np.array_equal(back.values, ds.values)
    assert np.array_equal(back.labels, ds.labels)
    assert back.provenance == str(path)
    assert path.read_text().startswith("VMFTS v1 N=15 D=2 T=7\n# origin \"test\"\n")


def test_sparse_labels_are_remapped_densely():
    text = "VMFTS v1 N=3 D=1 T=2\n7\t0 1\n-2\t1 2\n7\t3 4\n"
    ds = dm.parse_dataset(text)
    assert list(ds.labels) == [2, 1, 2]
    assert ds.label_map == {1: -2, 2: 7}
    assert dm.format_dataset(ds).splitlines()[1:] == ["7\t0.0 1.0", "-2\t1.0 2.0", "7\t3.0 4.0"]


@pytest.mark.parametrize("text, line", [
    ("", 1),
    ("VMFTS v1 N=1 D=1\n1\t0 0\n", 1),
    ("VMFTS v1 N=1 D=0 T=2\n", 1),
    ("VMFTS v1 N=2 D=1 T=2\n1\t0 0\n1\t0 x\n", 3),
    ("VMFTS v1 N=2 D=1 T=2\n1\t0 0\n1\t0 0 0\n", 3),
    ("VMFTS v1 N=2 D=1 T=2\n1\t0 0\n# note\na\t0 0\n", 4),
    ("VMFTS v1 N=1 D=1 T=2\n1 0 0\n", 2),
    ("VMFTS v1 N=1 D=1 T=2\n1\tinf 0\n", 2),
    ("VMFTS v1 N=1 D=1 T=2\n1\t0 0\n1\t0 0\n", 3),
])
def test_malformed_rows_name_the_line(text, line):
    with pytest.raises(FormatError) as exc:
        dm.parse_dataset(text)
    assert exc.value.line == line
    assert f"line {line}" in str(exc.value)


def test_count_mismatch_is_explicit():
    with pytest.raises(FormatError, match="N=3 but file holds 2"):
        dm.parse_dataset("VMFTS v1 N=3 D=1 T=1\n1\t0\n2\t0\n")


def test_unknown_version():
    with pytest.raises(FormatError, match="version"):
        dm.parse_dataset("VMFTS v9 N=1 D=1 T=1\n1\t0\n")


# ---------------------------------------------------------------------------
# standardization


def test_zscore_moments(rng):
    ds = dm.TimeSeriesDataset(rng.normal(3.0, 5.0, size=(40, 3, 20)), np.repeat([1, 2], 20))
    out = dm.zscore_normalize(ds)
    assert np.allclose(out.values.mean(axis=(0, 2)), 0.0, atol=1e-9)
    assert np.allclose(out.values.std(axis=(0, 2)), 1.0, atol=1e-9)
    manual = (ds.values - ds.values.mean(axis=(0, 2))[None, :, None]) / ds.values.std(axis=(0, 2))[None, :, None]
    assert np.allclose(out.values, manual, atol=1e-12)
    assert out.stats is not None


def test_zscore_constant_channel_and_already_standard(rng):
    v = rng.normal(size=(10, 2, 16))
    v[:, 0] = 4.2
    v[:, 1] = (v[:, 1] - v[:, 1].mean()) / v[:, 1].std()
    out = dm.zscore_normalize(dm.TimeSeriesDataset(v, [1] * 10))
    assert np.all(out.values[:, 0] == 0.0)
    assert np.allclose(out.values[:, 1], v[:, 1], atol=1e-12)


def test_zscore_reuses_training_statistics(rng):
    train, test = dm.split_train_test(small_ds(rng, n_per=10), 0.3, seed=1)
    train_n = dm.zscore_normalize(train)
    test_n = dm.zscore_normalize(test, train_n.stats)
    expected = (test.values - train_n.stats.mean[None, :, None]) / train_n.stats.std[None, :, None]
    assert np.allclose(test_n.values, expected, atol=1e-12)
    assert dm.ChannelStats.from_dict(train_n.stats.to_dict()).mean.tolist() == train_n.stats.mean.tolist()
    with pytest.raises(DomainError):
        dm.apply_channel_stats(test, dm.ChannelStats(np.zeros(5), np.ones(5)))


# ---------------------------------------------------------------------------
# synthetic generator


def test_synth_spec_validation():
    with pytest.raises(DomainError):
        dm.SynthSpec(classes=1)
    with pytest.raises(DomainError):
        dm.SynthSpec(classes=2, frequencies=(3.0, 3.0))
    with pytest.raises(DomainError):
        dm.SynthSpec(noise_std=-0.1)
    with pytest.raises(DomainError):
        dm.SynthSpec(classes=2, frequencies=(1.0,))


def test_synth_is_deterministic():
    a = dm.synth_generate(dm.SynthSpec(samples_per_class=10, seed=5))
    b = dm.synth_generate(dm.SynthSpec(samples_per_class=10, seed=5))
    c = dm.synth_generate(dm.SynthSpec(samples_per_class=10, seed=6))
    assert np.array_equal(a.values, b.values) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.values, c.values)
    assert dm.format_dataset(a) == dm.format_dataset(b)


def test_noise_free_samples_differ_only_by_phase():
    spec = dm.SynthSpec(classes=3, channels=2, length=64, samples_per_class=6, noise_std=0.0, seed=2)
    ds = dm.synth_generate(spec)
    t = np.arange(spec.length) / spec.length
    for x, c in zip(ds.values, ds.labels):
        f = spec.frequencies[c - 1]
        basis = np.stack([np.sin(2 * np.pi * f * t), np.cos(2 * np.pi * f * t)], axis=1)
        for channel in x:
            coef, *_ = np.linalg.lstsq(basis, channel, rcond=None)
            assert np.allclose(basis @ coef, channel, atol=1e-12)
            assert np.hypot(*coef) == pytest.approx(spec.amplitudes[c - 1], abs=1e-12)


def one_nn_accuracy(ds):
    """Leave-one-out 1-NN with Euclidean distance on the raw flattened series."""
    flat = ds.values.reshape(ds.n, -1)
    sq = np.sum(flat**2, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * flat @ flat.T
    np.fill_diagonal(d, np.inf)
    return float(np.mean(ds.labels[np.argmin(d, axis=1)] == ds.labels))


@pytest.mark.parametrize("spec", [
    dm.SynthSpec(),
    dm.SynthSpec(classes=3, frequencies=(4.0, 11.0, 19.0), noise_std=0.1, samples_per_class=50, seed=3),
])
def test_one_nn_separability(spec):
    assert one_nn_accuracy(dm.synth_generate(spec)) >= 0.95


# ---------------------------------------------------------------------------
# split


def test_split_stratification_arithmetic(rng):
    ds = small_ds(rng, n_per=20, C=4)
    train, test = dm.split_train_test(ds, 0.25, seed=0)
    assert (train.n, test.n) == (60, 20)
    assert list(np.bincount(test.labels)[1:]) == [5, 5, 5, 5]
    again_train, again_test = dm.split_train_test(ds, 0.25, seed=0)
    assert np.array_equal(again_test.values, test.values)
    both = np.concatenate([train.values, test.values])
    assert sorted(map(bytes, both)) == sorted(map(bytes, ds.values))


@given(sizes=st.lists(st.integers(2, 30), min_size=2, max_size=5),
       fraction=st.floats(0.05, 0.95), seed=st.integers(0, 1000))
def test_split_keeps_class_proportions(sizes, fraction, seed):
    labels = np.repeat(np.arange(1, len(sizes) + 1), sizes)
    ds = dm.TimeSeriesDataset(np.arange(labels.size, dtype=float).reshape(-1, 1, 1), labels)
    train, test = dm.split_train_test(ds, fraction, seed)
    assert train.n + test.n == ds.n
    assert not set(train.values.ravel()) & set(test.values.ravel())
    for c, size in enumerate(sizes, start=1):
        n_test = int(np.sum(test.labels == c))
        assert 1 <= n_test <= size - 1
        assert abs(n_test - fraction * size) <= 1.0


def test_split_errors(rng):
    ds = dm.TimeSeriesDataset(rng.normal(size=(3, 1, 4)), [1, 1, 2])
    with pytest.raises(DomainError, match="single sample"):
        dm.split_train_test(ds, 0.5, 0)
    for bad in (0.0, 1.0):
        with pytest.raises(DomainError):
            dm.split_train_test(small_ds(rng), bad, 0)


# ---------------------------------------------------------------------------
# batching


def test_full_batch_is_a_shuffle():
    labels = np.repeat([1, 2], 10)
    (batch,) = dm.batch_iter(labels, 20, seed=0, epoch=0)
    assert sorted(batch) == list(range(20)) and list(batch) != list(range(20))


@given(n=st.integers(4, 80), bs=st.integers(2, 80), seed=st.integers(0, 100), epoch=st.integers(0, 5),
       C=st.integers(1, 5))
def test_batches_form_a_permutation(n, bs, seed, epoch, C):
    if bs > n:
        bs = n
    labels = np.arange(n) % C + 1
    batches = dm.batch_iter(labels, bs, seed, epoch)
    assert sorted(np.concatenate(batches)) == list(range(n))
    assert all(len(b) >= bs for b in batches[:-1])
    last = batches[-1]
    if len(batches) > 1 and len(last) < bs:
        assert np.bincount(labels[last]).max() >= 2
    again = dm.batch_iter(labels, bs, seed, epoch)
    assert all(np.array_equal(a, b) for a, b in zip(batches, again))


def test_epoch_changes_order():
    labels = np.repeat([1, 2], 20)
    a = np.concatenate(dm.batch_iter(labels, 8, 0, 0))
    b = np.concatenate(dm.batch_iter(labels, 8, 0, 1))
    assert not np.array_equal(a, b)


def test_trailing_batch_without_a_pair_is_folded():
    labels = np.arange(1, 11)  # every class once, so no tail can hold a pair
    batches = dm.batch_iter(labels, 4, 0, 0)
    assert [len(b) for b in batches] == [4, 6]


def test_batch_errors():
    with pytest.raises(DomainError):
        dm.batch_iter([1, 1, 2], 1, 0, 0)
    with pytest.raises(DomainError):
        dm.batch_iter([1, 1, 2], 4, 0, 0)
