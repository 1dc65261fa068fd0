from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tempee.errors import ConfigError, ContractError
from tempee.sampling import PromptMask, RssSchedule, apply_prompts, keep_probability, sample_mask


class CountingTargets:
    """Array stand-in that counts every read of frame content."""

    def __init__(self, arr):
        self._arr = arr
        self.reads = 0

    @property
    def shape(self):
        return self._arr.shape

    def __getitem__(self, idx):
        self.reads += 1
        return self._arr[idx]

    def __array__(self, dtype=None, copy=None):
        self.reads += 1
        return np.asarray(self._arr, dtype=dtype)


def test_schedule_validation():
    with pytest.raises(ConfigError):
        RssSchedule(p_start=0.2, p_end=0.5)
    with pytest.raises(ConfigError):
        RssSchedule(decay_epochs=0)


def test_keep_probability_examples():
    s = RssSchedule(1.0, 0.0, 10)
    assert keep_probability(s, 0) == 1.0
    assert keep_probability(s, 5) == 0.5
    assert keep_probability(s, 10) == 0.0
    assert keep_probability(s, 99) == 0.0


@given(st.floats(0, 1), st.floats(0, 1), st.integers(1, 50), st.integers(0, 100), st.integers(0, 100))
def test_keep_probability_monotone(a, b, decay, e1, e2):
    s = RssSchedule(max(a, b), min(a, b), decay)
    lo, hi = sorted((e1, e2))
    assert keep_probability(s, hi) <= keep_probability(s, lo)


def test_masks():
    assert sample_mask(RssSchedule(), 0, 5, "test").keep == (False,) * 5
    assert sample_mask(RssSchedule(1.0, 1.0), 3, 5).keep == (True,) * 5
    m = sample_mask(RssSchedule(0.0, 0.0), 3, 5)
    assert m.keep == (False,) * 4 + (True,)
    with pytest.raises(ConfigError):
        sample_mask(RssSchedule(), 0, 0)
    with pytest.raises(ConfigError):
        sample_mask(RssSchedule(), 0, 3, "eval")


@given(st.integers(0, 2**31), st.integers(0, 200), st.integers(0, 10**6), st.integers(1, 30))
def test_mask_deterministic_and_last_frame_kept(seed, epoch, seq, k):
    s = RssSchedule(0.9, 0.1, 50, seed)
    a = sample_mask(s, epoch, k, "train", seq)
    assert a == sample_mask(s, epoch, k, "train", seq)
    assert a.keep[-1] and len(a) == k


def test_monte_carlo_keep_rate():
    s = RssSchedule(0.5, 0.5, 1, seed=11)
    kept = sum(sample_mask(s, 0, 21, "train", i).n_kept - 1 for i in range(10_000))
    assert abs(kept / (10_000 * 20) - 0.5) < 0.02


def test_apply_prompts_examples():
    t = np.arange(3 * 2 * 2, dtype=np.float32).reshape(3, 2, 2) + 1
    assert np.array_equal(apply_prompts(t, PromptMask((True,) * 3)), t)
    assert not apply_prompts(t, PromptMask((False,) * 3)).any()
    out = apply_prompts(t, PromptMask((True, False, True)))
    assert np.array_equal(out[0], t[0]) and not out[1].any() and np.array_equal(out[2], t[2])
    with pytest.raises(ContractError):
        apply_prompts(t, PromptMask((True, True)))


def test_test_mode_reads_no_targets():
    targets = CountingTargets(np.ones((20, 8, 8), dtype=np.float32))
    prompts = apply_prompts(targets, sample_mask(RssSchedule(), 0, 20, "test"))
    assert targets.reads == 0
    assert prompts.shape == (20, 8, 8) and not prompts.any()
