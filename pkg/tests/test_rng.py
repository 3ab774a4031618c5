import numpy as np
import pytest

from fqtlab import kernels
from fqtlab.rng import SLOT_ACT_GRAD, SLOT_WEIGHT_GRAD, Substream, batch_uniforms, split_seed

# Known-answer vectors for Philox4x32-10 from the Random123 distribution.
KAT = [
    ((0, 0, 0, 0), (0, 0), (0x6627E8D5, 0xE169C58D, 0xBC57AC4C, 0x9B00DBD8)),
    ((0xFFFFFFFF,) * 4, (0xFFFFFFFF,) * 2, (0x408F276D, 0x41C83B0E, 0xA20BC7C6, 0x6D5451FD)),
    (
        (0x243F6A88, 0x85A308D3, 0x13198A2E, 0x03707344),
        (0xA4093822, 0x299F31D0),
        (0xD16CFE09, 0x94FDCCEB, 0x5001E420, 0x24126EA1),
    ),
]


@pytest.mark.parametrize("counter,key,expected", KAT)
def test_philox_known_answers(counter, key, expected):
    out = kernels.philox_block(counter, key)
    assert tuple(int(w) for w in out) == expected


def test_uniform_from_words_oracle():
    # independent recomputation of the 53-bit mantissa construction
    x0, x1, _, _ = kernels.philox_block((5, 7, 1, 0), (11, 13))
    expect = ((int(x0) >> 5) * 2**26 + (int(x1) >> 6)) / 2**53
    got = kernels.uniforms_numpy(11, 13, np.array([7], dtype=np.uint64), 1, 0, 6)[0, 5]
    assert got == expect


def test_numba_and_numpy_uniforms_identical():
    trials = np.array([0, 1, 2**31, 2**32 - 1], dtype=np.uint64)
    a = kernels.uniforms_numpy(123, 456, trials, 3, 1, 50)
    b = kernels.uniforms_loop(123, 456, trials, 3, 1, 50)
    assert np.array_equal(a, b)


def test_numba_and_numpy_rounding_identical():
    rng = np.random.default_rng(0)
    v = rng.uniform(0, 15, (3, 40))
    trials = np.arange(3, dtype=np.uint64)
    a = kernels.stochastic_round_codes_numpy(v, 1, 2, trials, 0, 1)
    b = kernels.stochastic_round_codes_loop(v, 1, 2, trials, 0, 1)
    assert np.array_equal(a, b)


def test_substream_reproducible_and_independent():
    s = Substream(42, trial=3, layer=2, slot=SLOT_ACT_GRAD)
    assert np.array_equal(s.random((4, 5)), Substream(42, 3, 2, SLOT_ACT_GRAD).random((4, 5)))
    assert not np.array_equal(s.random(20), s.child(2, SLOT_WEIGHT_GRAD).random(20))
    assert not np.array_equal(s.random(20), Substream(43, 3, 2, SLOT_ACT_GRAD).random(20))
    assert not np.array_equal(s.random(20), Substream(42, 4, 2, SLOT_ACT_GRAD).random(20))


def test_prefix_stability():
    # a longer draw extends a shorter one: entry index is part of the counter
    s = Substream(9, 1, 0, 0)
    assert np.array_equal(s.random(10), s.random(30)[:10])


def test_batch_matches_single_trials():
    trials = np.array([5, 0, 17], dtype=np.uint64)
    rows = batch_uniforms(77, trials, 1, 0, 12)
    for i, t in enumerate(trials):
        assert np.array_equal(rows[i], Substream(77, int(t), 1, 0).random(12))


def test_uniform_range_and_moments():
    u = Substream(2024).random(200_000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 4 * np.sqrt(1 / 12 / u.size)
    assert abs(u.var() - 1 / 12) < 0.002


def test_seed_validation():
    assert split_seed(2**64 - 1) == (0xFFFFFFFF, 0xFFFFFFFF)
    with pytest.raises(ValueError):
        split_seed(-1)
    with pytest.raises(ValueError):
        split_seed(2**64)
    with pytest.raises(ValueError):
        Substream(0, trial=2**32)
