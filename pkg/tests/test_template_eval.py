import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from templar import synth
from templar.errors import DegenerateProtocol, EmptyInput, MissingMate
from templar.template_eval import (
    UNPROCESSABLE,
    SetupPolicy,
    Template,
    aggregate_splits,
    cosine,
    eval_identification,
    eval_verification,
    rates_at_threshold,
    roc_curve,
    score_pair,
    tar_at_far,
    template_descriptor,
    verification_from_scores,
)


def test_rates_worked_example():
    genuine, impostor = [0.9, 0.8, 0.3], [0.7, 0.2, 0.1]
    far, tar = rates_at_threshold(genuine, impostor, 0.75)
    assert far == 0.0 and tar == pytest.approx(2 / 3)
    roc = roc_curve(genuine, impostor)
    assert tar_at_far(roc, 0.0) == pytest.approx(2 / 3)
    assert tar_at_far(roc, 0.34) == pytest.approx(1.0)


def _roc_oracle(genuine, impostor):
    pts = {(0.0, 0.0)}
    for t in set(genuine) | set(impostor):
        pts.add((sum(s >= t for s in impostor) / len(impostor), sum(s >= t for s in genuine) / len(genuine)))
    return pts


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.integers(-20, 20), min_size=1, max_size=30),
    st.lists(st.integers(-20, 20), min_size=1, max_size=30),
)
def test_roc_matches_oracle(g, i):
    g = [x / 20 for x in g]
    i = [x / 20 for x in i]
    roc = roc_curve(g, i)
    assert set(roc) == _roc_oracle(g, i)
    fars = [f for f, _ in roc]
    tars = [t for _, t in roc]
    assert fars == sorted(fars) and tars == sorted(tars)
    for target in (0.01, 0.1, 0.5):
        ok = [(f, t) for f, t in _roc_oracle(g, i) if f <= target]
        best_far = max(f for f, _ in ok)
        assert tar_at_far(roc, target) == max(t for f, t in ok if f == best_far)


def _tmpl(tid, sid, *media):
    return Template(tid, sid, [np.asarray(m, dtype=float) for m in media])


def test_template_pooling():
    t = _tmpl("t", "s", [3.0, 0.0], [0.0, 0.5])
    np.testing.assert_allclose(template_descriptor(t), [math.sqrt(0.5)] * 2, atol=1e-15)
    assert template_descriptor(_tmpl("u", "s")) is UNPROCESSABLE


def test_max_pooling():
    t = _tmpl("t", "s", [1.0, 0.0], [0.0, 2.0], [-1.0, 0.0])
    np.testing.assert_allclose(template_descriptor(t, pooling="max"), [math.sqrt(0.5)] * 2, atol=1e-15)
    with pytest.raises(ValueError):
        template_descriptor(t, pooling="median")


def test_cosine_examples():
    assert cosine([1, 0], [0, 1]) == 0.0
    assert cosine([1, 1], [2, 2]) == pytest.approx(1.0)
    assert cosine([1, 0], [-3, 0]) == pytest.approx(-1.0)


def test_score_pair_symmetry_and_scale():
    rng = np.random.default_rng(0)
    a = _tmpl("a", "x", *rng.normal(size=(3, 6)))
    b = _tmpl("b", "y", *rng.normal(size=(2, 6)))
    assert score_pair(a, b) == score_pair(b, a)
    W = rng.normal(size=(6, 4))
    base = score_pair(a, b, W)
    for c in (0.25, 4.0, 1024.0):
        assert score_pair(a, b, c * W) == pytest.approx(base, abs=1e-12)
    scaled = _tmpl("a", "x", *[4.0 * m for m in a.media])
    assert score_pair(scaled, b) == pytest.approx(score_pair(a, b), abs=1e-12)


def test_setup_policies_on_pairs():
    good = _tmpl("g", "s", [1.0, 0.0])
    bad = _tmpl("b", "s")
    assert score_pair(good, bad, policy=SetupPolicy.SETUP1) is None
    assert score_pair(good, bad, policy="setup2") == -1.0


def _pair_set(rng, n=40, frac=0.0):
    temps = synth.random_templates(rng, n, 8, dim=5, max_media=3, unprocessable_frac=frac, noise=0.3)
    pairs = []
    for _ in range(120):
        i, j = rng.choice(len(temps), 2, replace=False)
        pairs.append((temps[i], temps[j], temps[i].subject_id == temps[j].subject_id))
    return pairs


def test_verification_policies_differ_only_on_unprocessable():
    rng = np.random.default_rng(1)
    pairs = _pair_set(rng, frac=0.2)
    r1 = eval_verification(pairs, policy="setup1")
    r2 = eval_verification(pairs, policy="setup2")
    n_bad = sum(a.unprocessable or b.unprocessable for a, b, _ in pairs)
    assert n_bad > 0
    assert r1.n_pairs_skipped == n_bad and r1.n_pairs_used == len(pairs) - n_bad
    assert r2.n_pairs_skipped == 0 and r2.n_pairs_used == len(pairs)
    bad_scores = [s for (s, _), (a, b, _) in zip(r2.scores, pairs) if a.unprocessable or b.unprocessable]
    assert bad_scores == [-1.0] * n_bad


def test_verification_needs_both_classes():
    t = _tmpl("a", "s", [1.0, 0.0])
    with pytest.raises(DegenerateProtocol):
        eval_verification([(t, t, True)])
    with pytest.raises(DegenerateProtocol):
        verification_from_scores([])


def _cmc_oracle(probes, gallery, policy):
    """Direct sort per probe; unprocessable entries score -1."""
    G = len(gallery)
    ranks = []
    for p in probes:
        pd = template_descriptor(p)
        if pd is UNPROCESSABLE:
            if policy == "setup1":
                continue
            ranks.append(G)
            continue
        scored = []
        for g in gallery:
            gd = template_descriptor(g)
            s = -1.0 if gd is UNPROCESSABLE else cosine(pd, gd)
            scored.append((-s, g.template_id, g.subject_id))
        scored.sort()
        ranks.append(1 + min(k for k, (_, _, sid) in enumerate(scored) if sid == p.subject_id))
    return [sum(r <= k for r in ranks) / len(ranks) for k in range(1, G + 1)]


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("policy", ["setup1", "setup2"])
def test_cmc_matches_oracle(seed, policy):
    rng = np.random.default_rng(seed)
    gallery = synth.random_templates(rng, 12, 12, dim=4, max_media=2, unprocessable_frac=0.1, noise=0.5)
    probes = synth.random_templates(rng, 15, 12, dim=4, max_media=3, unprocessable_frac=0.1, noise=0.5)
    for k, p in enumerate(probes):
        p.template_id = f"p{k}"
    rep = eval_identification(probes, gallery, policy=policy)
    assert rep.cmc == pytest.approx(_cmc_oracle(probes, gallery, policy), abs=1e-15)
    assert all(a <= b for a, b in zip(rep.cmc, rep.cmc[1:]))
    assert rep.cmc[-1] == 1.0


def test_ties_break_by_template_id():
    gallery = [_tmpl("z", "s1", [1.0, 0.0]), _tmpl("a", "s2", [1.0, 0.0])]
    probe = _tmpl("p", "s1", [1.0, 0.0])
    assert eval_identification([probe], gallery).ranks["p"] == 2


def test_unprocessable_probe_policies():
    gallery = [_tmpl("g1", "a", [1.0, 0.0]), _tmpl("g2", "b", [0.0, 1.0])]
    probes = [_tmpl("p1", "a", [1.0, 0.1]), _tmpl("p2", "b")]
    r1 = eval_identification(probes, gallery, policy="setup1")
    r2 = eval_identification(probes, gallery, policy="setup2")
    assert r1.n_probes_skipped == 1 and r1.rank_at[1] == 1.0
    assert r2.ranks["p2"] == 2 and r2.rank_at[1] == 0.5


def test_identification_errors():
    g = [_tmpl("g", "a", [1.0])]
    with pytest.raises(EmptyInput):
        eval_identification([g[0]], [])
    with pytest.raises(MissingMate):
        eval_identification([_tmpl("p", "zzz", [1.0])], g)
    with pytest.raises(DegenerateProtocol):
        eval_identification([_tmpl("p", "a")], g, policy="setup1")


def test_aggregate_two_splits():
    s = aggregate_splits([{"m": 0.8}, {"m": 0.9}])
    assert s.mean["m"] == pytest.approx(0.85, abs=1e-12)
    assert s.std["m"] == pytest.approx(0.05, abs=1e-12)


def test_aggregate_ten_splits_two_pass():
    vals = np.random.default_rng(3).random(10)
    s = aggregate_splits([{"m": v} for v in vals])
    mean = sum(vals) / 10
    std = math.sqrt(sum((v - mean) ** 2 for v in vals) / 10)
    assert abs(s.mean["m"] - mean) <= 1e-12 and abs(s.std["m"] - std) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=10))
def test_aggregate_mean_within_range(vals):
    s = aggregate_splits([{"m": v} for v in vals])
    assert min(vals) <= s.mean["m"] <= max(vals)
    assert s.std["m"] >= 0
    with pytest.raises(EmptyInput):
        aggregate_splits([])
