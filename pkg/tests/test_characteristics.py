import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from forgetsub.characteristics import (
    ForgettingEvaluator, IFRecord, forgetting_vector, full_forgetting, gather_if,
    outlier_rows, read_if_csv, target_rows, write_if_csv,
)
from forgetsub.datastore import EvalCache, RunKey
from forgetsub.errors import ConfigInvalid, EmptySubset, IncompleteRun
from forgetsub.metrics import forgetting_score

from oracles import forgetting_by_hand


def sim(u, k):
    return RunKey("simulated", user=u, hp=k)


def random_cache(seed, n=30, users=3, hps=2):
    rng = np.random.default_rng(seed)
    words = rng.integers(1, 12, n)
    base = rng.binomial(words, 0.1)
    runs = [sim(u, k) for u in range(users) for k in range(hps)]
    edits = np.array([rng.binomial(words, 0.12) for _ in runs])
    return EvalCache([f"s{i}" for i in range(n)], words, base, runs, edits)


def test_worked_example():
    cache = EvalCache(["a", "b"], [5, 5], [1, 0], [sim(0, 0)], [[2, 0]])
    vec = forgetting_vector(cache, [0, 1])
    assert vec.values.tolist() == pytest.approx([1.0])


def test_unchanged_run_gives_zero():
    cache = EvalCache(["a", "b"], [5, 5], [1, 3], [sim(0, 0), sim(0, 1)], [[1, 3], [2, 3]])
    assert forgetting_vector(cache, [0, 1]).values[0] == 0.0


def test_full_set_matches_scalar_scores_exactly():
    cache = random_cache(1)
    full = full_forgetting(cache)
    everything = range(cache.n_samples)
    w0 = cache.subset_wer(None, everything)
    eps = 1 / cache.ref_words.sum()
    for run, value in zip(full.runs, full.values):
        assert value == forgetting_score(cache.subset_wer(run, everything), w0, eps)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.data())
def test_subset_vector_matches_hand_sums(seed, data):
    cache = random_cache(seed)
    subset = data.draw(st.lists(st.integers(0, cache.n_samples - 1), min_size=1, max_size=12, unique=True))
    got = forgetting_vector(cache, subset).values
    want = forgetting_by_hand(cache.ref_words.tolist(), cache.baseline_edits.tolist(),
                              cache.run_edits.tolist(), subset)
    assert got.tolist() == pytest.approx(want, rel=1e-12, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 29))
def test_numerators_recombine_over_partition(seed, cut):
    cache = random_cache(seed)
    perm = np.random.default_rng(seed).permutation(cache.n_samples)
    ev = ForgettingEvaluator(cache)
    ra, ba, wa = ev.stats(perm[:cut])
    rb, bb, wb = ev.stats(perm[cut:])
    rf, bf, wf = ev.stats(perm)
    assert (ra + rb).tolist() == rf.tolist()
    assert ba + bb == bf and wa + wb == wf


def test_permutation_invariant():
    cache = random_cache(2)
    a = forgetting_vector(cache, [3, 7, 11, 20]).values
    b = forgetting_vector(cache, [20, 11, 3, 7]).values
    assert a.tolist() == b.tolist()


def test_zero_baseline_uses_guard():
    cache = EvalCache(["a", "b"], [4, 6], [0, 0], [sim(0, 0)], [[1, 0]])
    # WER0 = 0, guard = 1/10, WER after = 0.1
    assert forgetting_vector(cache, [0, 1]).values[0] == pytest.approx(1.0)
    assert forgetting_vector(cache, [0, 1], eps_div=0.001).values[0] == pytest.approx(100.0)


def test_errors():
    cache = random_cache(3)
    with pytest.raises(EmptySubset):
        forgetting_vector(cache, [])
    no_runs = EvalCache(["a"], [3], [1], [], np.zeros((0, 1)))
    with pytest.raises(ConfigInvalid):
        forgetting_vector(no_runs, [0])


def test_only_simulated_rows_by_default():
    runs = [sim(0, 0), RunKey("target", user=0, epoch=1)]
    cache = EvalCache(["a"], [4], [1], runs, [[2], [4]])
    vec = forgetting_vector(cache, [0])
    assert vec.runs == (sim(0, 0),)


def test_outlier_rows():
    runs = [sim(0, 0), sim(1, 0), sim(2, 0)]
    # baseline 50 edits / 500 words; run 1 improves by 10%
    cache = EvalCache(["a"], [500], [50], runs, [[51], [45], [50]])
    assert outlier_rows(cache) == [1]
    assert target_rows(cache) == [0, 1, 2]
    assert target_rows(cache, exclude_outliers=True) == [0, 2]


def full_scale_caches(users=72, hps=4, seed=0):
    rng = np.random.default_rng(seed)
    runs = [sim(u, k) for u in range(users) for k in range(hps)]
    words = rng.integers(3, 20, 200)
    val = EvalCache([f"v{i}" for i in range(200)], words, rng.binomial(words, 0.09), runs,
                    [rng.binomial(words, 0.1) for _ in runs])
    user_caches = {}
    for u in range(users):
        uw = rng.integers(3, 10, 24)
        user_runs = [sim(u, k) for k in range(hps)]
        user_caches[u] = EvalCache([f"f{u}_{j}" for j in range(24)], uw, rng.binomial(uw, 0.1),
                                   user_runs, [rng.binomial(uw, 0.05) for _ in user_runs])
    return val, user_caches


def test_gather_if_counts_and_values():
    val, users = full_scale_caches()
    records = gather_if(val, users)
    assert len(records) == 288
    full = full_forgetting(val).values
    for rec, f in zip(records, full):
        assert rec.forgetting == f
        uc = users[rec.run.user]
        before = uc.baseline_edits.sum() / uc.ref_words.sum()
        after = uc.edits_for(rec.run).sum() / uc.ref_words.sum()
        assert rec.improvement == pytest.approx((before - after) / before)


def test_gather_if_unchanged_run():
    runs = [sim(0, 0)]
    val = EvalCache(["a", "b"], [3, 4], [1, 0], runs, [[1, 0]])
    user = EvalCache(["f"], [5], [2], runs, [[2]])
    assert gather_if(val, {0: user}) == [IFRecord(sim(0, 0), 0.0, 0.0)]


def test_gather_if_missing_user():
    val, users = full_scale_caches(users=3)
    del users[1]
    with pytest.raises(IncompleteRun):
        gather_if(val, users)


def test_if_csv_round_trip(tmp_path):
    val, users = full_scale_caches(users=4)
    records = gather_if(val, users)
    write_if_csv(tmp_path / "if.csv", records)
    assert read_if_csv(tmp_path / "if.csv") == records
