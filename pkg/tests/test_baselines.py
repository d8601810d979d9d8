import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geocrowd.baselines import DS_SMOOTHING, dawid_skene_em, integrated_annotations, majority_vote
from geocrowd.errors import InvalidArgumentError
from geocrowd.simulator import AnnotationSet, ConfusionEnsemble, Dataset, sample_annotations


def planted(K, M, N, diag, p, seed):
    y = np.random.default_rng(seed).integers(0, K, N)
    off = (1 - diag) / (K - 1)
    A = np.full((M, K, K), off)
    for m in range(M):
        np.fill_diagonal(A[m], diag)
    ds = Dataset(np.zeros((1, N)), y, K)
    ann = sample_annotations(ds, ConfusionEnsemble(A, ["planted"] * M), p, seed=seed + 1)
    return y, A, ann


class TestMajorityVote:
    def test_counting(self):
        ann = AnnotationSet([0, 0, 0], [0, 1, 2], [0, 0, 1], 1, 3, 3)
        post = majority_vote(ann)
        np.testing.assert_allclose(post.q[:, 0], [2 / 3, 1 / 3, 0])
        assert post.hard[0] == 0

    def test_tie_goes_to_lowest_index(self):
        ann = AnnotationSet([0, 0], [0, 1], [2, 1], 1, 2, 3)
        assert majority_vote(ann).hard[0] == 1

    def test_unannotated_item_is_uniform(self):
        ann = AnnotationSet([0], [0], [1], 2, 1, 4)
        np.testing.assert_allclose(majority_vote(ann).q[:, 1], 0.25)

    def test_integrated_annotations(self):
        ann = AnnotationSet([0, 0, 2], [0, 1, 0], [1, 1, 2], 3, 2, 3)
        integ = integrated_annotations(majority_vote(ann), [0, 2])
        np.testing.assert_array_equal(integ.item, [0, 2])
        np.testing.assert_array_equal(integ.label, [1, 2])
        assert integ.n_annotators == 1


class TestDawidSkene:
    def test_single_perfect_annotator(self):
        K, N = 3, 90
        y = np.arange(N) % K
        ann = AnnotationSet(np.arange(N), np.zeros(N, dtype=int), y, N, 1, K)
        # one iteration: M-step on the one-hot vote shares, then one E-step.
        # Longer runs drift to uniform: with a single annotator the likelihood
        # is flat over doubly-stochastic A and the smoothing prior decides.
        res = dawid_skene_em(ann, max_iter=1)
        np.testing.assert_array_equal(res.posterior.hard, y)
        np.testing.assert_allclose(res.posterior.q, np.eye(K)[:, y], atol=1e-3)
        s = DS_SMOOTHING
        expected_diag = (N / K + s) / (N / K + s * K)
        np.testing.assert_allclose(np.diag(res.confusions[0]), expected_diag, atol=2e-3)
        assert np.diag(res.confusions[0]).min() > 0.99

    def test_uniform_spammers_converge_to_prior(self):
        # every item gets each label once and every annotator uses each label
        # equally often: the symmetric fixed point
        K, N = 3, 300
        item = np.repeat(np.arange(N), K)
        annot = np.tile(np.arange(K), N)
        ann = AnnotationSet(item, annot, (item + annot) % K, N, K, K)
        res = dawid_skene_em(ann, max_iter=200)
        assert res.converged
        np.testing.assert_allclose(res.confusions, 1 / K, atol=1e-12)
        np.testing.assert_allclose(res.posterior.q, np.broadcast_to(res.priors[:, None], (K, N)),
                                   atol=1e-12)

    def test_planted_recovery(self):
        y, A, ann = planted(2, 3, 2000, 0.9, 1.0, seed=0)
        res = dawid_skene_em(ann)
        assert np.mean(res.posterior.hard == y) >= 0.95
        assert np.mean((res.confusions - A) ** 2) <= 0.01

    @settings(max_examples=15, deadline=None)
    @given(st.integers(2, 4), st.floats(0.3, 1.0), st.integers(0, 2**32 - 1))
    def test_objective_non_decreasing(self, K, p, seed):
        _, _, ann = planted(K, 5, 300, 0.7, p, seed)
        res = dawid_skene_em(ann, max_iter=50, tol=0.0)
        assert np.all(np.diff(res.objective) >= -1e-9)

    def test_deterministic(self):
        _, _, ann = planted(3, 4, 200, 0.7, 0.5, seed=3)
        a, b = dawid_skene_em(ann), dawid_skene_em(ann)
        np.testing.assert_array_equal(a.confusions, b.confusions)
        np.testing.assert_array_equal(a.posterior.q, b.posterior.q)

    def test_label_switching_permutes_outputs(self):
        K = 3
        _, _, ann = planted(K, 5, 400, 0.75, 0.6, seed=4)
        sigma = np.array([2, 0, 1])
        relabeled = AnnotationSet(ann.item, ann.annot, sigma[ann.label], ann.n_items,
                                  ann.n_annotators, K)
        a, b = dawid_skene_em(ann), dawid_skene_em(relabeled)
        np.testing.assert_allclose(b.posterior.q[sigma], a.posterior.q, atol=1e-10)
        np.testing.assert_allclose(b.confusions[:, sigma][:, :, sigma], a.confusions, atol=1e-10)
        np.testing.assert_allclose(b.priors[sigma], a.priors, atol=1e-10)

    def test_empty_rejected(self):
        with pytest.raises(InvalidArgumentError):
            dawid_skene_em(AnnotationSet([], [], [], 3, 2, 2))
