import filecmp

import numpy as np
import pytest

from forgetsub.characteristics import full_forgetting, gather_if, summarize
from forgetsub.datastore import cache_from_files, ingest_samples, user_caches_from_files
from forgetsub.earlystop import read_trajectories
from forgetsub.errors import ConfigInvalid
from forgetsub.metrics import edit_distance, normalize
from forgetsub.pseudousers import read_embeddings, read_pseudo_users
from forgetsub.synthgen import SynthConfig, generate_world

SMALL = dict(num_val_samples=60, pool_size=80, top_n=20, set_size=6, num_users=4,
             num_centroids=2, num_targets=3, max_epochs=4, vocab_size=300, severity_mean=0.03)


def small(**kw):
    return SynthConfig(**{**SMALL, **kw})


def test_default_calibration():
    cache = generate_world(SynthConfig()).val_cache()
    base = cache.baseline_edits.sum() / cache.ref_words.sum()
    assert abs(base - 0.0943) <= 0.01
    mean, std = summarize(full_forgetting(cache).values)
    assert 0.010 <= mean <= 0.025 and 0.010 <= std <= 0.025


def test_zero_severity_is_null_process():
    w = generate_world(small(severity_mean=0.0, target_severity_scale=0.0))
    cache = w.val_cache()
    assert np.all(full_forgetting(cache).values == 0)
    assert all(np.array_equal(row, cache.baseline_edits) for t in w.trajectories() for row in t.val_edits)


@pytest.mark.parametrize("noise", [0.0, 0.3])
def test_text_round_trip_matches_drawn_counts(tmp_path, noise):
    w = generate_world(small(run_noise=noise, seed=5))
    paths = w.write(tmp_path)
    direct = w.val_cache()
    parsed = cache_from_files(paths["samples"], paths["predictions"])
    assert parsed.runs == direct.runs
    assert np.array_equal(parsed.baseline_edits, direct.baseline_edits)
    assert np.array_equal(parsed.run_edits, direct.run_edits)
    assert np.array_equal(parsed.ref_words, direct.ref_words)

    users = {u.user_id: u.sample_ids for u in read_pseudo_users(paths["pseudo_users"])}
    parsed_u = user_caches_from_files(paths["pool_samples"], paths["pool_predictions"], users)
    for uid, c in w.user_caches().items():
        assert np.array_equal(parsed_u[uid].run_edits, c.run_edits)
        assert np.array_equal(parsed_u[uid].baseline_edits, c.baseline_edits)
    assert gather_if(parsed, parsed_u) == gather_if(direct, w.user_caches())

    back = read_trajectories(paths["trajectories"], direct.n_samples)
    for a, b in zip(w.trajectories(), back):
        assert np.array_equal(a.val_edits, b.val_edits) and a.user_wer == b.user_wer


def test_generator_guarantees_for_exact_edits():
    w = generate_world(small())
    for i in range(len(w.val.ids)):
        ref = normalize(w.val.text(i))
        assert len(set(ref)) == len(ref)
    mask = w.run_mask(w.runs[-1])
    fill = w._fill(w.val, (9,))
    for i in range(len(w.val.ids)):
        hyp = normalize(w.val.hypothesis(i, mask, fill))
        lo, hi = w.val.offsets[i], w.val.offsets[i + 1]
        assert edit_distance(normalize(w.val.text(i)), hyp) == mask[lo:hi].sum()


def test_trajectories_monotone_in_epoch():
    for t in generate_world(small(seed=2)).trajectories():
        assert np.all(np.diff(t.val_edits, axis=0) >= 0)
        assert all(a.edits >= b.edits for a, b in zip(t.user_wer, t.user_wer[1:]))


def test_hp_scale_orders_by_epochs_times_lr():
    w = generate_world(small())
    prod = [h.epochs * h.learning_rate for h in w.config.hp_grid]
    scale = w.hp_scale()
    assert scale.max() == 1.0
    assert np.all(np.argsort(prod, kind="stable") == np.argsort(scale, kind="stable"))


def test_planted_clusters_recovered():
    cfg = small(embedding_noise=0.3)
    w = generate_world(cfg)
    cluster = {sid: i % cfg.num_centroids for i, sid in enumerate(w.pool.ids)}
    for u in w.pseudo_users:
        centroid = u.user_id // cfg.sets_per_centroid
        assert all(cluster[s] == centroid for s in u.sample_ids)


def test_deterministic_files(tmp_path):
    a = generate_world(small(seed=11)).write(tmp_path / "a")
    b = generate_world(small(seed=11)).write(tmp_path / "b")
    c = generate_world(small(seed=12)).write(tmp_path / "c")
    for key in a:
        assert filecmp.cmp(a[key], b[key], shallow=False), key
    assert not filecmp.cmp(a["predictions"], c["predictions"], shallow=False)
    ids, emb = read_embeddings(a["embeddings"])
    assert len(ids) == SMALL["pool_size"] and emb.shape[1] == 32
    assert len(ingest_samples(a["samples"])) == SMALL["num_val_samples"]


@pytest.mark.parametrize("bad", [
    dict(num_val_samples=0), dict(baseline_wer_target=1.0), dict(utterance_length=(5, 3)),
    dict(num_users=5), dict(susceptibility_spread=0.5), dict(set_size=30),
    dict(hp_grid=()), dict(run_noise=1.5), dict(vocab_size=10, utterance_length=(4, 20)),
])
def test_invalid_config(bad):
    with pytest.raises(ConfigInvalid):
        generate_world(small(**bad))


def test_from_mapping_rejects_unknown():
    with pytest.raises(ConfigInvalid):
        SynthConfig.from_mapping({"nope": 1})
    cfg = SynthConfig.from_mapping({"seed": 3, "hp_grid": [[8, 1e-5]], "utterance_length": [2, 5]})
    assert SynthConfig.from_mapping(cfg.to_json()) == cfg
