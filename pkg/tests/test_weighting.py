import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scsdpo.advantage import grpo_total_magnitude
from scsdpo.dist_core import ParameterError
from scsdpo.weighting import (
    ConfigurationError,
    FrozenWeightTable,
    frozen_weight_table,
    hard_filter_weight,
    normalize_batch,
    pass_rate,
    raw_weight,
)

GRID = [k / 8 for k in range(9)]


@pytest.mark.parametrize("rewards, p", [([1, 0, 1, 1], 0.75), ([0] * 8, 0.0), ([1] * 8, 1.0)])
def test_pass_rate(rewards, p):
    est = pass_rate(rewards)
    assert est.p_hat == p
    assert est.g == len(rewards) and est.k == sum(rewards)


def test_pass_rate_empty():
    with pytest.raises(ParameterError):
        pass_rate([])


def test_raw_weight_examples():
    assert raw_weight(0.5, 0.5) == 0.5
    for alpha in (0.25, 0.5, 1.0, 2.0):
        assert raw_weight(1.0, alpha) == 0.0
        assert raw_weight(0.0, alpha) == 0.0
    assert raw_weight(1 / 8, 0.5) == pytest.approx(0.33071891388307384, abs=1e-12)
    assert raw_weight(1 / 8, 1.0) == pytest.approx(0.109375, abs=1e-15)


@pytest.mark.parametrize("p, alpha", [(0.5, 0.0), (0.5, -1.0), (-0.1, 0.5), (1.1, 0.5)])
def test_raw_weight_rejects(p, alpha):
    with pytest.raises(ParameterError):
        raw_weight(p, alpha)


def test_normalize_batch_examples():
    wv = normalize_batch([0.5, 0.33071891388307384, 0.0])
    np.testing.assert_allclose(wv.normalized, [1.2037766123870306, 0.7962233876129694, 0.0], atol=1e-12)
    assert wv.active_set.tolist() == [0, 1]
    np.testing.assert_allclose(normalize_batch([0.3, 0.3, 0.3]).normalized, [1, 1, 1], atol=1e-15)
    assert normalize_batch([0.0, 0.0]).normalized.tolist() == [0.0, 0.0]


@pytest.mark.parametrize("p, expected", [(0.5, 1.0), (0.125, 0.0), (0.2, 1.0), (0.8, 1.0), (0.81, 0.0)])
def test_hard_filter(p, expected):
    assert hard_filter_weight(p, 0.2, 0.8) == expected


def test_hard_filter_bad_bounds():
    with pytest.raises(ParameterError):
        hard_filter_weight(0.5, 0.9, 0.1)


def test_frozen_table_examples(tmp_path):
    assert dict(frozen_weight_table({1: 0.5, 2: 1.0}, 1.0)) == {1: 1.0, 2: 0.0}
    assert set(frozen_weight_table({q: 0.5 for q in range(5)}, 1.0).values()) == {1.0}
    table = frozen_weight_table({7: 0.25}, 1.0)
    assert table[7] == 1.0
    with pytest.raises(ConfigurationError):
        table[8]
    path = tmp_path / "table.json"
    table.to_json(path)
    assert json.loads(path.read_text()) == {"7": 1.0}
    assert dict(FrozenWeightTable.from_json(path)) == {7: 1.0}


def test_frozen_table_is_global_not_per_batch():
    table = frozen_weight_table({0: 0.5, 1: 0.125, 2: 0.875, 3: 0.0}, 1.0)
    vals = np.array([table[q] for q in range(3)])
    assert vals.mean() == pytest.approx(1.0)
    # a batch holding only question 1 keeps its global weight, not 1
    assert table[1] < 1.0


@pytest.mark.parametrize("alpha", [0.25, 0.5, 1.0, 2.0])
def test_symmetry_and_unimodality(alpha):
    for p in GRID:
        assert raw_weight(p, alpha) == pytest.approx(raw_weight(1 - p, alpha), abs=1e-15)
    w = [raw_weight(p, alpha) for p in GRID]
    assert all(a < b for a, b in zip(w[:4], w[1:5]))
    assert all(a > b for a, b in zip(w[4:8], w[5:]))


def test_scale_consistency_with_grpo_magnitude():
    for G in range(2, 17):
        for k in range(G + 1):
            mag = grpo_total_magnitude([1] * k + [0] * (G - k))
            assert raw_weight(k / G, 0.5) * 2 * G == pytest.approx(mag, abs=1e-9)


def test_alpha_one_over_suppresses():
    for p in GRID:
        if p not in (0.0, 0.5, 1.0):
            assert raw_weight(p, 1.0) < raw_weight(p, 0.5)


raw_batches = arrays(
    np.float64,
    st.integers(1, 40),
    elements=st.one_of(st.just(0.0), st.floats(1e-6, 1.0)),
)


@settings(max_examples=300, deadline=None)
@given(raw_batches)
def test_normalization_contract(raw):
    wv = normalize_batch(raw)
    active = wv.active_set
    assert np.all(wv.normalized[raw == 0] == 0)
    if active.size == 0:
        assert not np.any(wv.normalized)
        return
    assert abs(wv.normalized[active].mean() - 1.0) <= 1e-12
    ratios = wv.normalized[active] / wv.normalized[active[0]]
    np.testing.assert_allclose(ratios, raw[active] / raw[active[0]], rtol=1e-12)
    np.testing.assert_allclose(normalize_batch(wv.normalized).normalized, wv.normalized, rtol=1e-12, atol=0)
