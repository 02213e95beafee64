import itertools
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dupdetect.corpus import DuplicatePair, split
from dupdetect.embedding import EmbeddingStore
from dupdetect.evalharness import (auc, batch_size_sweep, compare_settings, evaluate_index, pairwise_auc_eval,
                                   sample_negative_pairs, top_n_accuracy)
from dupdetect.rank import LatentIndex, project
from dupdetect.refine import TrainingConfig
from dupdetect.synthetic import SyntheticSpec, make_corpus


def _ranked_fixture():
    """Two queries whose labelled originals sit at ranks 2 and 7 by construction.

    Query 1 is e0 and query 2 is e1. Each candidate leans toward one query
    along its own private axis, so it scores zero against the other query.
    """
    dim = 24
    ids, rows = [1, 2], [np.eye(dim)[0], np.eye(dim)[1]]
    cosines = [0.95, 0.9, 0.85, 0.8, 0.75, 0.7, 0.65, 0.6, 0.55, 0.5]
    axis = 2
    for base, q in ((100, 0), (200, 1)):
        for r, c in enumerate(cosines, start=1):
            v = np.zeros(dim)
            v[q] = c
            v[axis] = np.sqrt(1 - c * c)
            axis += 1
            ids.append(base + r)
            rows.append(v)
    index = project(EmbeddingStore(ids, np.array(rows), "t", dim))
    # candidate base+r sits at rank r for its query
    return index, [DuplicatePair(1, 102), DuplicatePair(2, 207)]


class TestTopN:
    def test_ranks_two_and_seven(self):
        index, pairs = _ranked_fixture()
        acc = top_n_accuracy(index, pairs, Ns=(1, 3, 5, 10, 30))
        assert acc == {1: 0.0, 3: 0.5, 5: 0.5, 10: 1.0, 30: 1.0}

    def test_any_labelled_original_counts(self):
        index, _ = _ranked_fixture()
        acc = top_n_accuracy(index, [DuplicatePair(1, 109), DuplicatePair(1, 103)], Ns=(1, 3))
        assert acc == {1: 0.0, 3: 1.0}

    def test_monotone_in_n(self):
        index, pairs = _ranked_fixture()
        acc = top_n_accuracy(index, pairs, Ns=range(1, 12))
        values = [acc[n] for n in sorted(acc)]
        assert values == sorted(values)

    def test_missing_query_excluded(self):
        index, pairs = _ranked_fixture()
        acc, scored, excluded = top_n_accuracy(index, pairs + [DuplicatePair(999, 1)], Ns=(10,),
                                               return_counts=True)
        assert acc == {10: 1.0} and scored == 2 and excluded == 1

    def test_empty_test_set(self):
        index, _ = _ranked_fixture()
        with pytest.raises(ValueError):
            top_n_accuracy(index, [])


class TestAuc:
    def test_worked(self):
        assert auc([0.9, 0.4], [0.5, 0.1]) == pytest.approx(0.75)

    def test_all_ties(self):
        assert auc([0.3, 0.3], [0.3, 0.3, 0.3]) == pytest.approx(0.5)

    def test_perfect(self):
        assert auc([2, 3], [0, 1]) == 1.0 and auc([0, 1], [2, 3]) == 0.0

    def test_empty(self):
        with pytest.raises(ValueError):
            auc([], [1.0])

    @given(st.lists(st.integers(-5, 5), min_size=1, max_size=12), st.lists(st.integers(-5, 5), min_size=1, max_size=12))
    def test_matches_pair_count_and_symmetry(self, pos, neg):
        # Oracle: fraction of (pos, neg) pairs ordered correctly, ties one half.
        wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
        assert auc(pos, neg) == pytest.approx(wins / (len(pos) * len(neg)), abs=1e-12)
        assert auc(pos, neg) + auc(neg, pos) == pytest.approx(1.0, abs=1e-12)


class TestPairwise:
    def test_identical_vs_orthogonal(self):
        # duplicates are identical, everything else orthogonal
        dim = 12
        rows, ids, pairs = [], [], []
        for c in range(6):
            for j in range(2):
                rows.append(np.eye(dim)[c])
                ids.append(10 * c + j)
            pairs.append(DuplicatePair(10 * c + 1, 10 * c))
        index = project(EmbeddingStore(ids, np.array(rows), "t", dim))
        assert pairwise_auc_eval(index, pairs, neg_ratio=9, seed=0) == 1.0

    def test_constant_scores(self):
        index = LatentIndex(list(range(1, 9)), np.tile([1.0, 0.0], (8, 1)))
        assert pairwise_auc_eval(index, [DuplicatePair(2, 1), DuplicatePair(4, 3)]) == 0.5

    def test_negatives_exclude_known_pairs(self):
        index = LatentIndex([1, 2, 3], np.eye(3))
        known = [DuplicatePair(2, 1), DuplicatePair(3, 1)]
        negs = sample_negative_pairs(index, 50, known, seed=1)
        assert {frozenset(p) for p in negs} == {frozenset((2, 3))}

    def test_matches_brute_force_and_deterministic(self):
        rng = np.random.default_rng(0)
        index = LatentIndex(list(range(30)), rng.standard_normal((30, 5)))
        pairs = [DuplicatePair(2 * i + 1, 2 * i) for i in range(5)]
        a = pairwise_auc_eval(index, pairs, neg_ratio=9, seed=4)
        assert a == pairwise_auc_eval(index, pairs, neg_ratio=9, seed=4)
        negs = sample_negative_pairs(index, 45, pairs, seed=4)
        pos = [float(index[p.dup_id] @ index[p.orig_id]) for p in pairs]
        neg = [float(index[x] @ index[y]) for x, y in negs]
        wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
        assert a == pytest.approx(wins / (len(pos) * len(neg)), abs=1e-12)

    def test_too_small(self):
        with pytest.raises(ValueError):
            sample_negative_pairs(LatentIndex([1, 2], np.eye(2)), 1, [DuplicatePair(2, 1)])


@pytest.fixture(scope="module")
def synth():
    corpus, store = make_corpus(SyntheticSpec(clusters=60, dim=24, signal_dim=6))
    return corpus, split(corpus, 0.8, 0), store


def test_compare_single_setting(synth):
    corpus, s, store = synth
    table = compare_settings(corpus, s, store, {"raw": None})
    direct = evaluate_index(project(store), s)
    assert table.reports["raw"].top_n == direct.top_n
    assert table.reports["raw"].pool_size == len(store)
    lines = table.to_csv().splitlines()
    assert lines[0] == "top_n,raw" and lines[1].startswith("1,") and lines[-1].startswith("auc,")
    doc = json.loads(table.to_json())
    assert set(doc["settings"]) == {"raw"}


def test_compare_is_deterministic(synth):
    corpus, s, store = synth
    cfgs = {"triplet": TrainingConfig(loss="triplet", batch_size=8, epochs=2),
            "mnr": TrainingConfig(batch_size=8, epochs=2)}
    assert compare_settings(corpus, s, store, cfgs).to_json() == compare_settings(corpus, s, store, cfgs).to_json()


def test_sweep_columns(synth):
    corpus, s, store = synth
    table = batch_size_sweep(corpus, s, store, sizes=(4, 8), base=TrainingConfig(epochs=1))
    assert list(table.reports) == ["batch_4", "batch_8"]
    assert all(json.loads(r.config_echo)["batch_size"] == n for r, n in zip(table.reports.values(), (4, 8)))
