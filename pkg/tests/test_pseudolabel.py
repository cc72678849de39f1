import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradmix import datasets as ds
from gradmix import pseudolabel as pl
from gradmix import tensor_net as tn

LAYERS = [tn.FLATTEN, tn.dense(4, 6), tn.RELU]


def member(seed):
    return tn.init_network(LAYERS, {"t": 3}, seed=seed)


def unlabeled(n=12, seed=0):
    rng = np.random.default_rng(seed)
    dom = ds.DomainSpec("u", (0, 1, 2), "t")
    return ds.UnlabeledDataset(dom, rng.random((n, 2, 2, 1)), np.arange(n), rng.integers(0, 3, n))


def peaked_rows(label, p, n_classes=5):
    """Rows putting probability p on ``label`` and spreading the rest evenly."""
    rows = []
    for pi in p:
        r = np.full(n_classes, (1 - pi) / (n_classes - 1))
        r[label] = pi
        rows.append(r)
    return np.array(rows)


def prob_tensor(rng, R, N, C, sharp=3.0):
    return tn.softmax(sharp * rng.standard_normal((R, N, C)))


class TestEnsemblePredict:
    def test_single_member_matches_forward(self):
        u = unlabeled()
        m = member(3)
        probs = pl.ensemble_predict([m], u.images, "t")
        assert probs.shape == (1, 12, 3)
        direct = tn.softmax(tn.forward(m, "t", u.images))
        assert np.max(np.abs(probs[0] - direct)) <= 1e-12

    def test_identical_members(self):
        probs = pl.ensemble_predict([member(1), member(1)], unlabeled().images, "t")
        np.testing.assert_array_equal(probs[0], probs[1])

    def test_rows_are_distributions(self):
        probs = pl.ensemble_predict([member(1), member(2), member(3)], unlabeled().images, "t")
        np.testing.assert_allclose(probs.sum(axis=2), 1.0, atol=1e-12)

    def test_incompatible_heads(self):
        other = tn.init_network(LAYERS, {"t": 4}, seed=0)
        with pytest.raises(ValueError):
            pl.ensemble_predict([member(1), other], unlabeled().images, "t")
        with pytest.raises(ValueError):
            pl.ensemble_predict([member(1)], unlabeled().images, "missing")


class TestHardLabel:
    def test_unanimous_and_confident(self):
        assert pl.hard_label(peaked_rows(4, [0.9, 0.85, 0.95])) == 4

    def test_one_member_below_threshold(self):
        assert pl.hard_label(peaked_rows(4, [0.9, 0.79, 0.95])) is None

    def test_disagreement(self):
        rows = np.vstack([peaked_rows(4, [0.9, 0.9]), peaked_rows(2, [0.9])])
        assert pl.hard_label(rows) is None

    def test_threshold_is_strict(self):
        assert pl.hard_label(peaked_rows(1, [0.8, 0.9])) is None

    def test_default_threshold(self):
        assert pl.HARD_THRESHOLD == 0.8

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 4))
    def test_vectorised_agrees_with_rowwise(self, seed, R):
        probs = prob_tensor(np.random.default_rng(seed), R, 10, 4)
        accepted, labels, _ = pl.hard_labels(probs, 0.7)
        for n in range(10):
            single = pl.hard_label(probs[:, n], 0.7)
            assert (single is not None) == bool(accepted[n])
            if single is not None:
                assert single == labels[n]

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    def test_raising_threshold_never_adds(self, seed, t1, t2):
        lo, hi = sorted((t1, t2))
        probs = prob_tensor(np.random.default_rng(seed), 3, 20, 5)
        a_lo = pl.hard_labels(probs, lo)[0]
        a_hi = pl.hard_labels(probs, hi)[0]
        assert np.all(a_lo | ~a_hi)


class TestSoftLabel:
    def test_single_row(self):
        row = np.array([0.2, 0.5, 0.3])
        np.testing.assert_array_equal(pl.soft_label(row), row)

    def test_two_one_hots(self):
        np.testing.assert_array_equal(pl.soft_label([[1, 0, 0], [0, 0, 1]]), [0.5, 0, 0.5])

    def test_random_rows_match_mean(self, rng):
        rows = rng.dirichlet(np.ones(6), size=4)
        independent = [sum(r[c] for r in rows) / 4 for c in range(6)]
        assert np.max(np.abs(pl.soft_label(rows) - independent)) <= 1e-12

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 5))
    def test_convex_combination(self, seed, R):
        rows = np.random.default_rng(seed).dirichlet(np.ones(4), size=R)
        y = pl.soft_label(rows)
        assert np.all(rows.min(axis=0) - 1e-15 <= y) and np.all(y <= rows.max(axis=0) + 1e-15)
        assert abs(y.sum() - 1) <= 1e-12


def ensemble(*seeds):
    return pl.EnsembleSpec([member(s) for s in seeds], [1.0 - 0.1 * i for i in range(len(seeds))], "t")


class TestPseudoSet:
    def test_soft_covers_all(self):
        u = unlabeled()
        p = pl.build_pseudo_set(u, ensemble(1, 2, 3), "soft")
        assert len(p) == len(u)
        np.testing.assert_allclose(p.labels.sum(axis=1), 1.0, atol=1e-6)
        assert p.loss_kind == "kl"

    def test_hard_with_threshold_one_can_be_empty(self):
        p = pl.build_pseudo_set(unlabeled(), ensemble(1, 2), "hard", threshold=1.0)
        assert len(p) == 0 and p.loss_kind == "ce"

    def test_deterministic(self):
        a = pl.build_pseudo_set(unlabeled(), ensemble(1, 2), "hard", threshold=0.3)
        b = pl.build_pseudo_set(unlabeled(), ensemble(1, 2), "hard", threshold=0.3)
        assert a.manifest() == b.manifest()

    def test_empty_unlabeled(self):
        with pytest.raises(ValueError):
            pl.build_pseudo_set(unlabeled().subset([]), ensemble(1), "hard")

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            pl.build_pseudo_set(unlabeled(), ensemble(1), "fuzzy")

    @pytest.mark.parametrize("seed", range(5))
    def test_precision_not_below_any_member(self, seed):
        rng = np.random.default_rng(seed)
        truth = rng.integers(0, 4, 200)
        # members: noisy copies of the truth with different skill
        probs = []
        for skill in (2.0, 3.0, 4.0):
            logits = rng.standard_normal((200, 4))
            logits[np.arange(200), truth] += skill
            probs.append(tn.softmax(logits))
        probs = np.stack(probs)
        accepted, labels, _ = pl.hard_labels(probs, 0.5)
        assert accepted.any()
        precision = np.mean(labels[accepted] == truth[accepted])
        for p in probs:
            assert precision >= np.mean(p[accepted].argmax(axis=1) == truth[accepted])

    def test_manifest_lists_members(self, tmp_path):
        ens = ensemble(1, 2)
        p = pl.build_pseudo_set(unlabeled(), ens, "soft")
        pl.write_manifest(p, tmp_path / "m.json", [pl.params_digest(m) for m in ens.members])
        m = json.loads((tmp_path / "m.json").read_text())
        assert m["mode"] == "soft" and len(m["items"]) == 12 and len(m["member_digests"]) == 2
        assert m["provenance"] == ens.digest()

    def test_precision_against_sealed_truth(self):
        u = unlabeled()
        p = pl.build_pseudo_set(u, ensemble(1), "hard", threshold=0.0)
        truth = ds.unseal_labels(u)
        assert pl.label_precision(p, truth) == np.mean(p.labels == truth[p.indices])


class TestEnsembleSpec:
    def test_must_be_ranked(self):
        with pytest.raises(ValueError):
            pl.EnsembleSpec([member(1), member(2)], [0.5, 0.9], "t")

    def test_needs_members(self):
        with pytest.raises(ValueError):
            pl.EnsembleSpec([], [], "t")

    def test_top(self):
        assert ensemble(1, 2, 3).top(2).R == 2


def _val(labels):
    dom = ds.DomainSpec("t", (0, 1), "t")
    n = len(labels)
    return ds.LabeledDataset(dom, np.zeros((n, 1, 1, 1)), np.array(labels), np.arange(100, 100 + n))


def _hard(labels, conf):
    n = len(labels)
    return pl.PseudoLabeledSet("hard", np.arange(n), np.array(labels), np.array(conf), 0.8, "x")


def _unl(n):
    dom = ds.DomainSpec("t", (0, 1), "t")
    return ds.UnlabeledDataset(dom, np.arange(n, dtype=float).reshape(n, 1, 1, 1), np.arange(n))


class TestEnlarge:
    def test_highest_min_confidence_wins(self):
        v = _val([0, 1])
        p = _hard([0, 0, 0], [0.85, 0.95, 0.9])
        out = pl.enlarge_validation(v, p, _unl(3), per_class=3)
        # class 0 has one original and room for two: candidates 1 (0.95) and 2 (0.9)
        assert out.rows.tolist() == [100, 101, 1, 2]
        assert out.labels.tolist() == [0, 1, 0, 0]

    def test_full_class_unchanged(self):
        v = _val([0, 0, 1])
        out = pl.enlarge_validation(v, _hard([0, 1], [0.9, 0.9]), _unl(2), per_class=2)
        assert out.rows.tolist() == [100, 101, 102, 1]

    def test_empty_supply(self):
        v = _val([0, 1])
        assert pl.enlarge_validation(v, _hard([], []), _unl(0), per_class=5) is v

    def test_soft_set_rejected(self):
        p = pl.PseudoLabeledSet("soft", np.arange(1), np.ones((1, 2)) / 2, np.ones(1), 0.8, "x")
        with pytest.raises(ValueError):
            pl.enlarge_validation(_val([0]), p, _unl(1))

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(0, 1), max_size=6), st.lists(st.tuples(st.integers(0, 1), st.floats(0.8, 1)),
                                                         max_size=10), st.integers(1, 5))
    def test_superset_and_capacity(self, v_labels, cands, per_class):
        v = _val(v_labels)
        p = _hard([c for c, _ in cands], [f for _, f in cands])
        out = pl.enlarge_validation(v, p, _unl(len(cands)), per_class)
        assert out.rows[: len(v)].tolist() == v.rows.tolist()
        assert len(set(out.rows.tolist())) == len(out)
        for c in (0, 1):
            have = int(np.sum(out.labels == c))
            assert have <= max(per_class, int(np.sum(v.labels == c)))
