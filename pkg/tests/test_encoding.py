import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from pydantic import ValidationError

from mip.encoding import (
    NONE,
    EncodingConfig,
    build_interaction_embedding,
    encode,
    interaction_embeddings,
    onehot_encode,
    sinusoid_encode,
    twohot_encode,
)
from mip.numerics import make_rng

SIN4 = EncodingConfig(kind="sinusoid", dim=4)
ONEHOT = EncodingConfig(kind="onehot", base=2.0, bucket_count=4)
TWOHOT = EncodingConfig(kind="twohot", base=2.0, bucket_count=16)


def test_sinusoid_at_zero():
    assert sinusoid_encode(0.0, SIN4).tolist() == [0.0, 1.0, 0.0, 1.0]


def test_sinusoid_two_dims():
    out = sinusoid_encode(1.0, EncodingConfig(kind="sinusoid", dim=2, max_scale=1e4))
    np.testing.assert_allclose(out, [0.8414709848078965, 0.5403023058681398], atol=1e-15)


def test_sinusoid_frequencies():
    cfg = EncodingConfig(kind="sinusoid", dim=8, max_scale=1e4)
    t = 123.4
    out = sinusoid_encode(t, cfg)
    for m in range(4):
        w = t / 1e4 ** (2 * m / 8)
        assert out[2 * m] == pytest.approx(math.sin(w), abs=1e-15)
        assert out[2 * m + 1] == pytest.approx(math.cos(w), abs=1e-15)


@given(st.floats(0, 1e7))
def test_sinusoid_pairs_on_unit_circle(t):
    out = sinusoid_encode(t, EncodingConfig(kind="sinusoid", dim=16))
    np.testing.assert_allclose(out[0::2] ** 2 + out[1::2] ** 2, 1.0, atol=1e-12)


@pytest.mark.parametrize("kw", [{"kind": "sinusoid", "dim": 3}, {"kind": "onehot", "base": 1.0}, {"kind": "twohot", "bucket_count": 1}])
def test_bad_configs_rejected(kw):
    with pytest.raises(ValidationError):
        EncodingConfig(**kw)


@pytest.mark.parametrize("t,expected", [(0, [1, 0, 0, 0]), (1.5, [1, 0, 0, 0]), (2, [0, 1, 0, 0]), (5, [0, 0, 1, 0]), (1e9, [0, 0, 0, 1])])
def test_onehot_buckets(t, expected):
    assert onehot_encode(t, ONEHOT).tolist() == expected


def test_twohot_exact_power():
    for i in range(5):
        out = twohot_encode(2.0**i, TWOHOT)
        expected = np.zeros(16)
        expected[i + 1] = 1.0
        np.testing.assert_allclose(out, expected, atol=1e-12)


def test_twohot_log_midpoint():
    out = twohot_encode(math.sqrt(2) * 2**3, TWOHOT)
    assert out[3] == pytest.approx(0.5, abs=1e-12) and out[4] == pytest.approx(0.5, abs=1e-12)
    assert np.count_nonzero(out) == 2


def test_twohot_zero_and_overflow():
    assert twohot_encode(0.0, TWOHOT)[0] == 1.0
    assert twohot_encode(2.0**40, TWOHOT)[-1] == 1.0
    with pytest.raises(ValueError):
        twohot_encode(-1.0, TWOHOT)


def test_twohot_random_digits_sum_to_one():
    rng = make_rng(0)
    for t in rng.uniform(0, 5e4, size=1000):
        out = twohot_encode(t, TWOHOT)
        assert abs(out.sum() - 1) < 1e-12
        assert out.min() >= 0 and out.max() <= 1
        nz = np.flatnonzero(out)
        assert len(nz) <= 2 and (len(nz) < 2 or nz[1] == nz[0] + 1)


def test_interaction_embedding_layout():
    p = np.array([0.3, -0.2])
    two = EncodingConfig(kind="sinusoid", dim=2)
    e = build_interaction_embedding(p, 0.0, 0, two, two)
    assert e.tolist() == [0.3, -0.2, 0.0, 1.0, 0.0, 1.0]
    assert build_interaction_embedding(p, 5.0, 3, NONE, NONE).tolist() == p.tolist()


def test_sequence_encoding_is_elementwise():
    rng = make_rng(1)
    P = rng.normal(size=(6, 4))
    t = np.sort(rng.uniform(0, 20, 6))
    cfg = EncodingConfig(kind="sinusoid", dim=4)
    E1 = interaction_embeddings(P, t, cfg, cfg)
    t2 = t.copy()
    t2[3] += 7.0
    E2 = interaction_embeddings(P, t2, cfg, cfg)
    changed = np.flatnonzero(np.any(E1 != E2, axis=1))
    assert changed.tolist() == [3]
    for j in range(6):
        np.testing.assert_array_equal(E1[j], build_interaction_embedding(P[j], t[j], j, cfg, cfg))


def test_encode_dispatch_shapes():
    t = np.array([0.0, 1.0, 10.0])
    assert encode(t, NONE).shape == (3, 0)
    assert encode(t, TWOHOT).shape == (3, 16)
    assert encode(t, EncodingConfig(kind="onehot")).sum(axis=1).tolist() == [1, 1, 1]
