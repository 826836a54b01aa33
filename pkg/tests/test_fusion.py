import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage
from scipy.optimize import minimize

from oracles import planted_weak
from sas_saliency.aspect_color import colorize
from sas_saliency.fusion import (GladPrior, GladState, WeakMapSet, build_fusion_maps, confidence_weights, glad_em,
                                 glad_em_votes, glad_objective, global_votes, lowest_reliability, normalized_l1,
                                 replace_lowest_reliability, softmax, superpixel_average, superpixelize)
from sas_saliency.scene import generate_scene, random_scene_spec

FIXTURE = np.array([[1, 1, 0, 0], [1, 0, 0, 1], [1, 1, 0, 1]], dtype=float)


def brute_objective(theta, votes, prior=GladPrior()):
    """Log of the sum over all 2^d joint label assignments, plus the log-prior."""
    m, d = votes.shape
    a, log_b = theta[:m], theta[m:]
    s = 1 / (1 + np.exp(-a[:, None] / np.exp(log_b)[None, :]))          # (m, d) P(correct)
    total = 0.0
    for z in itertools.product((0, 1), repeat=d):
        agree = votes == np.array(z)[None, :]
        total += np.prod(np.where(agree, s, 1 - s)) * prior.p_positive ** sum(z) * (1 - prior.p_positive) ** (d - sum(z))
    log_prior = (-0.5 * np.sum((a - prior.a_mean) ** 2) / prior.a_var - 0.5 * np.sum(log_b ** 2) / prior.log_b_var
                 - 0.5 * (m * np.log(2 * np.pi * prior.a_var) + d * np.log(2 * np.pi * prior.log_b_var)))
    return np.log(total) + log_prior


def brute_maximum(votes):
    m, d = votes.shape
    best = -np.inf
    for a0 in itertools.product((-1.0, 1.0, 3.0), repeat=m):
        res = minimize(lambda t: -brute_objective(t, votes), np.r_[a0, np.zeros(d)], method="Nelder-Mead",
                       options=dict(xatol=1e-9, fatol=1e-12, maxiter=20000, maxfev=20000))
        best = max(best, -res.fun)
    return best


def scene_image(seed, size=32):
    stack, _ = generate_scene(random_scene_spec(np.random.default_rng(seed), height=size, width=size))
    return colorize(stack)


class TestSuperpixels:
    def test_single_region(self, rng):
        sp = superpixelize(rng.uniform(size=(8, 8, 3)), 1)
        assert sp.d == 1 and np.all(sp.labels == 0)

    def test_constant_image_quadrants(self):
        sp = superpixelize(np.full((16, 20, 3), 0.4), 4)
        assert sp.d == 4
        areas = np.bincount(sp.labels.ravel())
        assert areas.max() <= 1.1 * areas.min()
        for lab in range(4):
            rows, cols = np.nonzero(sp.labels == lab)
            assert len(rows) == (rows.max() - rows.min() + 1) * (cols.max() - cols.min() + 1)

    def test_two_tone_edge(self):
        img = np.zeros((16, 16, 3))
        img[:, 9:] = 1.0
        sp = superpixelize(img, 2)
        assert sp.d == 2
        assert len(np.unique(sp.labels[:, :9])) == 1 and len(np.unique(sp.labels[:, 9:])) == 1

    @pytest.mark.parametrize("target", [8, 16, 32, 64])
    def test_count_and_connectivity(self, target):
        sp = superpixelize(scene_image(target), target)
        assert 0.8 * target <= sp.d <= 1.2 * target
        np.testing.assert_array_equal(np.unique(sp.labels), np.arange(sp.d))
        for lab in range(sp.d):
            assert ndimage.label(sp.labels == lab)[1] == 1

    def test_too_many(self):
        with pytest.raises(ValueError):
            superpixelize(np.zeros((3, 3, 3)), 10)
        with pytest.raises(ValueError):
            superpixelize(np.zeros((3, 3, 3)), 0)


class TestAverage:
    def test_constant(self, rng):
        labels = rng.integers(0, 5, (6, 6))
        np.testing.assert_allclose(superpixel_average(np.full((6, 6), 0.3), labels), 0.3, atol=1e-15)

    def test_pair_mean(self):
        out = superpixel_average(np.array([[0.2, 0.4]]), np.array([[0, 0]]))
        np.testing.assert_allclose(out, [[0.3, 0.3]])

    def test_groupby_oracle(self, rng):
        m = rng.uniform(size=(8, 8))
        labels = rng.integers(0, 6, (8, 8))
        want = np.zeros_like(m)
        for lab in np.unique(labels):
            want[labels == lab] = m[labels == lab].mean()
        np.testing.assert_allclose(superpixel_average(m, labels), want, atol=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            superpixel_average(np.zeros((3, 3)), np.zeros((3, 4), dtype=int))


class TestGlad:
    def test_fixture_matches_brute_force(self):
        fit = glad_em_votes(FIXTURE, max_iter=5000, tol=1e-12)
        best = brute_maximum(FIXTURE)
        np.testing.assert_allclose(fit.objective[-1], best, rtol=5e-4)
        # the vectorized objective agrees with enumeration at the fitted point
        theta = np.r_[fit.a, np.log(fit.b)]
        np.testing.assert_allclose(glad_objective(FIXTURE, fit.a, np.log(fit.b)), brute_objective(theta, FIXTURE),
                                   rtol=1e-12)

    def test_monotone_on_random_instances(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            m, d = int(rng.integers(2, 6)), int(rng.integers(2, 30))
            fit = glad_em_votes((rng.uniform(size=(m, d)) < rng.uniform(0.2, 0.8)).astype(float), max_iter=60)
            assert np.all(np.diff(fit.objective) >= -1e-9)

    def test_unanimous(self):
        votes = np.tile([1.0, 0.0, 1.0, 1.0, 0.0], (4, 1))
        fit = glad_em_votes(votes)
        np.testing.assert_array_less(np.abs(fit.q - votes[0]), 0.01)

    def test_opposite_voters_symmetric(self):
        votes = np.array([[1.0, 0.0, 1.0, 0.0], [0.0, 1.0, 0.0, 1.0]])
        np.testing.assert_allclose(glad_em_votes(votes).q, 0.5, atol=1e-12)

    def test_single_detector_rejected(self):
        with pytest.raises(ValueError):
            glad_em_votes(np.ones((1, 4)))

    def test_planted_truth_ranked_first(self):
        wins = sum(int(np.argmax(glad_em(planted_weak(seed), "local").a.mean(0)) == 0) for seed in range(100))
        assert wins >= 95

    def test_planted_truth_ranked_first_globally(self):
        wins, informative = 0, 0
        for seed in range(100):
            weak = planted_weak(seed, n_images=30)
            rates = global_votes(weak).mean(1)
            first = int(np.argmax(glad_em(weak, "global").alpha) == 0)
            wins += first
            # a clear lead in agreement rate must carry through to the reliability ranking
            if rates[0] >= max(rates[1:]) + 0.1:
                informative += 1
                assert first, seed
        # the misses are seeds where every detector sits beyond the cutoff on nearly every image
        assert wins >= 90 and informative >= 50

    @pytest.mark.xfail(strict=True, reason="coin-flip detectors carry no evidence that singles out the good one")
    def test_planted_truth_against_coin_flips(self):
        wins = sum(int(np.argmax(glad_em(planted_weak(seed, n_images=5, other_rates=(0.5, 0.5)), "local")
                                 .a.mean(0)) == 0) for seed in range(100))
        assert wins >= 95

    def test_state_levels(self, rng):
        maps = WeakMapSet(rng.uniform(size=(3, 2, 8, 8)), [rng.integers(0, 4, (8, 8)) for _ in range(3)])
        local = glad_em(maps, "local")
        glob = glad_em(maps, "global")
        assert local.a.shape == (3, 2) and len(local.b) == 3 and glob.alpha.shape == (2,) and glob.beta.shape == (3,)
        for q in local.q_local + [glob.q_global]:
            assert q.min() >= 0 and q.max() <= 1
        assert all(np.all(b > 0) for b in local.b) and np.all(glob.beta > 0)
        with pytest.raises(ValueError):
            glad_em(maps, "middle")
        rep = json.loads(local.combine(glob).to_json(["x", "y"]))
        assert set(rep["global_reliability"]) == {"x", "y"} and len(rep["image_difficulty"]) == 3


def random_weak(rng, n=3, m=3, size=6):
    labels = [rng.integers(0, 4, (size, size)) for _ in range(n)]
    raw = rng.uniform(size=(n, m, size, size))
    return WeakMapSet.from_raw(raw, labels)


class TestFusionMaps:
    def test_equal_reliabilities_give_mean(self, rng):
        weak = random_weak(rng)
        fm = build_fusion_maps(weak, GladState(a=np.ones((3, 3))), GladState(alpha=np.full(3, 2.0)))
        np.testing.assert_allclose(fm.kappa, weak.maps.mean(1), atol=1e-12)
        np.testing.assert_allclose(fm.pi, fm.mean, atol=1e-12)

    def test_dominant_reliability(self, rng):
        weak = random_weak(rng)
        a = np.zeros((3, 3))
        a[:, 1] = 1e4
        fm = build_fusion_maps(weak, GladState(a=a), GladState(alpha=np.array([0.0, 0.0, np.inf])))
        np.testing.assert_allclose(fm.kappa, weak.maps[:, 1], atol=1e-12)
        np.testing.assert_allclose(fm.pi, weak.maps[:, 2], atol=1e-12)

    def test_weighted_sum_oracle(self, rng):
        weak = random_weak(rng)
        a, alpha = rng.normal(size=(3, 3)), rng.normal(size=3)
        fm = build_fusion_maps(weak, GladState(a=a), GladState(alpha=alpha))
        for i in range(3):
            w = np.exp(a[i]) / np.exp(a[i]).sum()
            np.testing.assert_allclose(fm.kappa[i], sum(w[k] * weak.maps[i, k] for k in range(3)), atol=1e-9)
        wg = np.exp(alpha) / np.exp(alpha).sum()
        np.testing.assert_allclose(fm.pi, np.einsum("k,nkhw->nhw", wg, weak.maps), atol=1e-9)

    @given(st.integers(0, 2 ** 31 - 1), st.permutations(range(4)))
    @settings(max_examples=20)
    def test_permutation_equivariant(self, seed, perm):
        r = np.random.default_rng(seed)
        weak = random_weak(r, m=4)
        a, alpha = r.normal(size=(3, 4)), r.normal(size=4)
        fm = build_fusion_maps(weak, GladState(a=a), GladState(alpha=alpha))
        p = list(perm)
        pw = WeakMapSet(weak.maps[:, p], weak.superpixels)
        fp = build_fusion_maps(pw, GladState(a=a[:, p]), GladState(alpha=alpha[p]))
        np.testing.assert_allclose(fp.kappa, fm.kappa, atol=1e-12)
        np.testing.assert_allclose(fp.pi, fm.pi, atol=1e-12)
        assert 0 <= fm.kappa.min() and fm.kappa.max() <= 1 and 0 <= fm.pi.min() and fm.pi.max() <= 1

    def test_softmax_handles_infinity(self):
        np.testing.assert_allclose(softmax(np.array([1.0, np.inf, 2.0])), [0, 1, 0])

    def test_normalized_l1(self):
        assert normalized_l1(np.ones(4), np.ones(4)) == 0.0
        assert normalized_l1(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 2.0
        np.testing.assert_allclose(normalized_l1(np.array([0.5, 0.5]), np.array([1.0, 0.0])), 1.0)
        assert normalized_l1(np.zeros(3), np.zeros(3)) == 0.0
        assert normalized_l1(np.ones(3), np.zeros(3)) == np.inf


class TestReplacement:
    def test_count_zero(self, rng):
        weak = random_weak(rng)
        out = replace_lowest_reliability(weak, GladState(alpha=np.array([0.1, 5, 5])), rng.uniform(size=(3, 6, 6)), 0)
        np.testing.assert_array_equal(out.maps, weak.maps)

    def test_argmin_replaced(self, rng):
        weak = random_weak(rng)
        branch = rng.uniform(size=(3, 6, 6))
        out = replace_lowest_reliability(weak, GladState(alpha=np.array([0.1, 5, 5])), branch, 1)
        for i in range(3):
            np.testing.assert_allclose(out.maps[i, 0], superpixel_average(branch[i], weak.superpixels[i]))
        np.testing.assert_array_equal(out.maps[:, 1:], weak.maps[:, 1:])
        assert out.names[0].endswith(">branch")

    def test_ties_to_lowest_index(self):
        assert lowest_reliability(np.array([2.0, 1.0, 1.0, 1.0]), 2) == [1, 2]

    def test_count_too_large(self, rng):
        with pytest.raises(ValueError):
            replace_lowest_reliability(random_weak(rng), GladState(alpha=np.ones(3)), np.zeros((3, 6, 6)), 3)


class TestConfidence:
    def test_uniform_difficulties(self, rng):
        sps = [rng.integers(0, 4, (5, 5)) for _ in range(2)]
        st_ = GladState(b=[np.full(4, 0.7), np.full(4, 0.7)])
        w = confidence_weights(st_, GladState(beta=np.full(2, 1.3)), sps)
        np.testing.assert_allclose(w, 1.0)

    def test_impossible_region(self):
        sps = [np.array([[0, 1]])]
        w = confidence_weights(GladState(b=[np.array([1.0, 1e12])]), GladState(beta=np.array([1.0])), sps)
        assert w[0, 0, 0] == 1.0 and w[0, 0, 1] < 1e-11

    def test_product_oracle(self, rng):
        sps = [rng.integers(0, 3, (4, 4)) for _ in range(3)]
        b = [rng.uniform(0.2, 3, 3) for _ in range(3)]
        beta = rng.uniform(0.2, 3, 3)
        w = confidence_weights(GladState(b=b), GladState(beta=beta), sps)
        for i in range(3):
            gamma = (1 / b[i]) / (1 / b[i]).max()
            img = (1 / beta[i]) / (1 / beta).max()
            np.testing.assert_allclose(w[i], img * gamma[sps[i]], atol=1e-9)
        assert w.min() >= 0 and w.max() <= 1


class TestWeakMapSet:
    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            WeakMapSet(np.full((1, 2, 3, 3), 1.5), [np.zeros((3, 3), int)])

    def test_needs_superpixels_per_image(self):
        with pytest.raises(ValueError):
            WeakMapSet(np.zeros((2, 2, 3, 3)), [np.zeros((3, 3), int)])
