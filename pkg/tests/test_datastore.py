import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from forgetsub.datastore import (
    BASELINE, EvalCache, RunKey, build_cache, cache_from_files, ingest_predictions,
    ingest_samples, subset_wer, write_jsonl,
)
from forgetsub.errors import (
    CacheFormatError, DuplicateId, EmptySubset, IncompleteRun, IndexOutOfRange,
    MalformedRecord, UnknownSample,
)

from oracles import dp_edit_distance


def write(path, records):
    write_jsonl(path, records)
    return path


@pytest.fixture
def toy_files(tmp_path):
    samples = write(tmp_path / "samples.jsonl", [
        {"id": "s1", "text": "Call Mom now"},
        {"id": "s2", "text": "open maps"},
    ])
    sim = {"kind": "simulated", "user": 0, "hp": 1}
    preds = write(tmp_path / "preds.jsonl", [
        {"run": {"kind": "baseline"}, "sample_id": "s1", "hyp": "call mom now"},
        {"run": {"kind": "baseline"}, "sample_id": "s2", "hyp": "open maps"},
        {"run": sim, "sample_id": "s2", "hyp": "Open  MAPS"},
        {"run": sim, "sample_id": "s1", "hyp": "call tom now"},
    ])
    return samples, preds


def test_ingest_samples_in_order(toy_files):
    samples = ingest_samples(toy_files[0])
    assert [s.id for s in samples] == ["s1", "s2"]
    assert samples[0].reference == ("call", "mom", "now")
    assert [s.ref_words for s in samples] == [3, 2]


def test_ingest_samples_duplicate(tmp_path):
    path = write(tmp_path / "dup.jsonl", [{"id": "a", "text": "x"}, {"id": "a", "text": "y"}])
    with pytest.raises(DuplicateId):
        ingest_samples(path)


@pytest.mark.parametrize("line", ['{"id": 3, "text": "x"}', "not json", "[1, 2]", '{"id": "a"}'])
def test_ingest_samples_malformed_reports_line(tmp_path, line):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"id": "ok", "text": "fine"}\n' + line + "\n")
    with pytest.raises(MalformedRecord) as err:
        ingest_samples(path)
    assert err.value.line_no == 2


def test_ingest_predictions_normalizes_like_references(toy_files):
    samples = ingest_samples(toy_files[0])
    batch = ingest_predictions(toy_files[1], samples)
    sim = RunKey("simulated", user=0, hp=1)
    assert batch[sim]["s2"] == samples[1].reference
    assert batch[BASELINE]["s1"] == samples[0].reference


def test_ingest_predictions_incomplete_names_sample(tmp_path, toy_files):
    samples = ingest_samples(toy_files[0])
    path = write(tmp_path / "p.jsonl", [
        {"run": {"kind": "baseline"}, "sample_id": "s1", "hyp": "a"},
    ])
    with pytest.raises(IncompleteRun) as err:
        ingest_predictions(path, samples)
    assert err.value.missing == {"baseline": ["s2"]}


def test_ingest_predictions_expected_subset(tmp_path, toy_files):
    samples = ingest_samples(toy_files[0])
    run = RunKey("simulated", user=3, hp=0)
    path = write(tmp_path / "p.jsonl", [
        {"run": run.to_json(), "sample_id": "s2", "hyp": "a"},
    ])
    assert ingest_predictions(path, samples, expected={run: ["s2"]})[run] == {"s2": ("a",)}
    other = RunKey("simulated", user=4, hp=0)
    with pytest.raises(IncompleteRun):
        ingest_predictions(path, samples, expected={run: ["s2"], other: ["s1"]})


def test_ingest_predictions_unknown_sample(tmp_path, toy_files):
    samples = ingest_samples(toy_files[0])
    path = write(tmp_path / "p.jsonl", [
        {"run": {"kind": "baseline"}, "sample_id": "zz", "hyp": "a"},
    ])
    with pytest.raises(UnknownSample):
        ingest_predictions(path, samples)


@pytest.mark.parametrize("run", [
    {"kind": "baseline", "user": 1},
    {"kind": "simulated", "user": 1},
    {"kind": "nope"},
    {"kind": "target", "user": "x"},
])
def test_ingest_predictions_bad_run_key(tmp_path, toy_files, run):
    samples = ingest_samples(toy_files[0])
    path = write(tmp_path / "p.jsonl", [{"run": run, "sample_id": "s1", "hyp": "a"}])
    with pytest.raises(MalformedRecord):
        ingest_predictions(path, samples)


def test_build_cache_toy(toy_files):
    cache = cache_from_files(*toy_files)
    assert cache.ref_words.tolist() == [3, 2]
    assert cache.baseline_edits.tolist() == [0, 0]
    # one substitution in the first sample, checked against the DP oracle
    assert dp_edit_distance(["call", "mom", "now"], ["call", "tom", "now"]) == 1
    assert cache.run_edits.tolist() == [[1, 0]]
    assert cache.runs == [RunKey("simulated", user=0, hp=1)]


def test_cache_round_trip_byte_identical(tmp_path, toy_files):
    a = cache_from_files(*toy_files)
    b = cache_from_files(*toy_files)
    a.save(tmp_path / "a.json")
    b.save(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    c = EvalCache.load(tmp_path / "a.json")
    c.save(tmp_path / "c.json")
    assert (tmp_path / "c.json").read_bytes() == (tmp_path / "a.json").read_bytes()


def test_cache_rejects_bad_version(tmp_path, toy_files):
    obj = cache_from_files(*toy_files).to_json()
    obj["version"] = 99
    (tmp_path / "c.json").write_text(json.dumps(obj))
    with pytest.raises(CacheFormatError):
        EvalCache.load(tmp_path / "c.json")


def hand_cache():
    return EvalCache(["a", "b", "c"], [2, 3, 5], [1, 0, 2],
                     [RunKey("simulated", 0, 0)], [[2, 0, 0]])


def test_subset_wer_examples():
    cache = hand_cache()
    # indices 0 and 2 are the 1-based {1, 3} of the worked example
    assert subset_wer(cache, BASELINE, [0, 2]) == pytest.approx(3 / 7)
    assert subset_wer(cache, None, [0, 1, 2]) == pytest.approx(3 / 10)
    assert subset_wer(cache, None, [1]) == 0.0
    assert subset_wer(cache, RunKey("simulated", 0, 0), [0, 1]) == pytest.approx(2 / 5)


def test_subset_wer_errors():
    cache = hand_cache()
    with pytest.raises(EmptySubset):
        subset_wer(cache, None, [])
    with pytest.raises(IndexOutOfRange):
        subset_wer(cache, None, [3])
    with pytest.raises(IndexOutOfRange):
        subset_wer(cache, None, [0, 0])
    zero = EvalCache(["a", "b"], [0, 2], [0, 0], [], np.zeros((0, 2)))
    with pytest.raises(EmptySubset):
        subset_wer(zero, None, [0])


@settings(max_examples=50, deadline=None)
@given(st.data())
def test_partition_recombines(data):
    n = data.draw(st.integers(2, 20))
    words = data.draw(st.lists(st.integers(1, 20), min_size=n, max_size=n))
    edits = data.draw(st.lists(st.integers(0, 20), min_size=n, max_size=n))
    cache = EvalCache([str(i) for i in range(n)], words, edits, [], np.zeros((0, n)))
    cut = data.draw(st.integers(1, n - 1))
    perm = data.draw(st.permutations(range(n)))
    a, b = perm[:cut], perm[cut:]
    wa = sum(words[i] for i in a)
    wb = sum(words[i] for i in b)
    pooled_edits = round(subset_wer(cache, None, a) * wa) + round(subset_wer(cache, None, b) * wb)
    assert pooled_edits == sum(edits)
    assert subset_wer(cache, None, range(n)) == sum(edits) / sum(words)


def test_cache_order_insensitive(tmp_path):
    rng = np.random.default_rng(3)
    vocab = ["w%d" % i for i in range(6)]
    samples = [{"id": f"s{i}", "text": " ".join(rng.choice(vocab, rng.integers(1, 6)))}
               for i in range(8)]
    runs = [{"kind": "baseline"}, {"kind": "simulated", "user": 0, "hp": 0},
            {"kind": "simulated", "user": 1, "hp": 0}, {"kind": "target", "user": 0, "epoch": 2}]
    preds = [{"run": r, "sample_id": s["id"], "hyp": " ".join(rng.choice(vocab, rng.integers(0, 6)))}
             for r in runs for s in samples]
    a = cache_from_files(write(tmp_path / "s1.jsonl", samples), write(tmp_path / "p1.jsonl", preds))
    order = rng.permutation(len(samples))
    b = cache_from_files(write(tmp_path / "s2.jsonl", [samples[i] for i in order]),
                         write(tmp_path / "p2.jsonl", [preds[i] for i in rng.permutation(len(preds))]))
    pos_b = {sid: i for i, sid in enumerate(b.sample_ids)}
    assert a.runs == b.runs
    for _ in range(20):
        sub = rng.choice(len(samples), rng.integers(1, len(samples) + 1), replace=False)
        mapped = [pos_b[a.sample_ids[i]] for i in sub]
        for run in [None] + a.runs:
            assert subset_wer(a, run, sub) == subset_wer(b, run, mapped)


def test_build_cache_worker_count_irrelevant(toy_files):
    samples = ingest_samples(toy_files[0])
    batch = ingest_predictions(toy_files[1], samples)
    base = batch.pop(BASELINE)
    one = build_cache(samples, base, batch, workers=1)
    two = build_cache(samples, base, batch, workers=2)
    assert one.to_json() == two.to_json()
