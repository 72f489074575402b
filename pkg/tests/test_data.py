import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matchtune.data import (
    Dataset,
    DatasetSpec,
    cluster_means,
    generate,
    inject_label_noise,
    load_dataset,
    reduce_minority,
    save_dataset,
    token_layout,
)
from matchtune.errors import ConfigError, ModeError, ParameterError, ParseError


def nearest_mean_accuracy(ds):
    means = np.stack([ds.features[ds.labels == c].mean(axis=0) for c in range(ds.num_classes)])
    d = ((ds.features[:, None, :] - means[None]) ** 2).sum(axis=2)
    return float(np.mean(d.argmin(axis=1) == ds.labels))


# -- gaussian clusters ------------------------------------------------------------


def test_gaussian_deterministic():
    spec = DatasetSpec(kind="gaussian", num_classes=3, num_instances=50, dim=4, seed=9)
    assert generate(spec) == generate(spec)
    assert generate(spec) != generate(DatasetSpec(kind="gaussian", num_classes=3, num_instances=50, dim=4, seed=10))


def test_gaussian_well_separated_nearest_mean():
    ds = generate(DatasetSpec(kind="gaussian", num_classes=2, num_instances=200, dim=2, separation=10.0, seed=0))
    assert nearest_mean_accuracy(ds) >= 0.99


def test_gaussian_zero_separation_is_chance():
    ds = generate(DatasetSpec(kind="gaussian", num_classes=2, num_instances=4000, dim=3, separation=0.0, seed=0))
    # the true means coincide, so fitted class means differ only by sampling noise
    gap = np.linalg.norm(ds.features[ds.labels == 0].mean(0) - ds.features[ds.labels == 1].mean(0))
    assert gap < 0.15


def test_gaussian_balanced_labels():
    ds = generate(DatasetSpec(kind="gaussian", num_classes=3, num_instances=31, dim=4))
    assert sorted(Counter(ds.labels.tolist()).values()) == [10, 10, 11]


def test_gaussian_mean_geometry():
    m = cluster_means(DatasetSpec(kind="gaussian", num_classes=2, dim=8, separation=4.0))
    np.testing.assert_allclose(np.linalg.norm(m, axis=1), 4.0)
    np.testing.assert_allclose(m[0], -m[1], atol=1e-12)


# -- token task --------------------------------------------------------------------


def test_token_layout():
    layout = token_layout(21, 2)
    assert layout.spurious == 0
    assert layout.signal == ((1, 2, 3, 4, 5), (6, 7, 8, 9, 10))
    assert layout.filler == tuple(range(11, 21))
    with pytest.raises(ConfigError):
        token_layout(3, 2)


def test_token_task_half_rho_balanced_groups():
    ds = generate(DatasetSpec(kind="tokens", num_classes=2, num_instances=4000, vocab=50, rho=0.5, seed=1))
    counts = ds.group_counts()
    assert len(counts) == 4
    assert all(abs(c - 1000) < 4 * math.sqrt(4000 * 0.25 * 0.75) for c in counts.values())


def test_token_task_full_rho_empties_minority():
    ds = generate(DatasetSpec(kind="tokens", num_classes=2, num_instances=300, vocab=50, rho=1.0, seed=1))
    assert set(ds.group_counts()) == {0, 3}


def test_token_task_minority_groups_binomial():
    ds = generate(DatasetSpec(kind="tokens", num_classes=2, num_instances=1000, vocab=64, rho=0.9, seed=2))
    counts = ds.group_counts()
    # each label has 500 instances; the minority group is Binomial(500, 0.1)
    sigma = math.sqrt(500 * 0.1 * 0.9)
    for g in (1, 2):
        assert abs(counts[g] - 50) <= 3 * sigma


def test_token_task_signal_token_present():
    ds = generate(DatasetSpec(kind="tokens", num_classes=3, num_instances=60, vocab=40, rho=0.7, seed=3))
    layout = token_layout(40, 3)
    for inst, row in zip(ds, ds.tokens):
        assert set(row) & set(layout.signal[inst.label])
        assert (0 in row) == bool(inst.group % 2)


# -- corruption --------------------------------------------------------------------


def small():
    return generate(DatasetSpec(kind="gaussian", num_classes=2, num_instances=200, dim=3, seed=4))


def test_noise_zero_unchanged():
    ds = small()
    assert inject_label_noise(ds, 0.0, 1) == ds


def test_noise_full_flips_binary():
    ds = small()
    assert np.all(inject_label_noise(ds, 1.0, 1).labels != ds.labels)


def test_noise_exact_count():
    ds = small()
    noisy = inject_label_noise(ds, 0.1, 1)
    assert int(np.sum(noisy.labels != ds.labels)) == 20
    np.testing.assert_array_equal(noisy.features, ds.features)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1), st.integers(0, 100))
def test_noise_count_property(ratio, seed):
    ds = generate(DatasetSpec(kind="gaussian", num_classes=3, num_instances=57, dim=2))
    noisy = inject_label_noise(ds, ratio, seed)
    assert int(np.sum(noisy.labels != ds.labels)) == math.floor(ratio * 57 + 1e-9)


def test_noise_rejects_bad_input():
    with pytest.raises(ParameterError):
        inject_label_noise(small(), 1.5, 0)
    with pytest.raises(ModeError):
        inject_label_noise(Dataset(np.array([0.5, 1.5]), features=np.zeros((2, 1))), 0.5, 0)


def multiset(ds):
    return Counter((tuple(i.payload), i.label) for i in ds)


def test_minority_keep_all_same_multiset():
    ds = small()
    assert multiset(reduce_minority(ds, 1, 1.0, 0)) == multiset(ds)


def test_minority_half_of_hundred():
    ds = small()
    out = reduce_minority(ds, 1, 0.5, 0)
    assert int(np.sum(out.labels == 1)) == 50


@settings(max_examples=20, deadline=None)
@given(st.floats(0.01, 1.0), st.integers(0, 50))
def test_minority_complement_untouched(keep, seed):
    ds = small()
    out = reduce_minority(ds, 0, keep, seed)
    assert int(np.sum(out.labels == 1)) == int(np.sum(ds.labels == 1))
    assert int(np.sum(out.labels == 0)) == math.floor(keep * 100 + 1e-9)


# -- file format --------------------------------------------------------------------


@pytest.mark.parametrize(
    "spec",
    [
        DatasetSpec(kind="gaussian", num_classes=3, num_instances=20, dim=4),
        DatasetSpec(kind="tokens", num_classes=2, num_instances=20, vocab=30, rho=0.8),
    ],
)
def test_roundtrip(tmp_path, spec):
    ds = generate(spec)
    save_dataset(ds, tmp_path / "d.jsonl")
    back = load_dataset(tmp_path / "d.jsonl")
    assert back == ds
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_empty_file(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert len(load_dataset(tmp_path / "e.jsonl")) == 0


def test_missing_label_names_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"payload": [1.0], "label": 0}\n{"payload": [2.0]}\n')
    with pytest.raises(ParseError, match="line 2"):
        load_dataset(path)


def test_malformed_json(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text("{not json\n")
    with pytest.raises(ParseError, match="line 1"):
        load_dataset(path)


def test_spec_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        DatasetSpec.from_dict({"kind": "gaussian", "colour": "red"})
    with pytest.raises(ParameterError):
        DatasetSpec(rho=1.2)
