import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from mglue.invariant_manifolds import (build_tangent_system, decay_fit,
                                       digit_inverse, digit_map,
                                       hamming_weight, partitions,
                                       shoot_stable, shoot_unstable,
                                       solve_tangent_lift,
                                       theta_identification, theta_inverse)
from mglue.path_space import DiscretePath, make_grid, path_from_function


class TestDigits:
    def test_examples(self):
        assert digit_map(9) == {1, 4}
        assert digit_map(1) == {1}
        assert digit_map(6) == {2, 3}

    def test_zero_rejected(self):
        with pytest.raises(ValueError):
            digit_map(0)

    def test_roundtrip_full_range(self):
        for k in range(1, 4097):
            assert digit_inverse(digit_map(k)) == k

    @settings(max_examples=100, deadline=None)
    @given(k=st.integers(1, 10**9))
    def test_roundtrip_property(self, k):
        D = digit_map(k)
        assert digit_inverse(D) == k
        assert len(D) == hamming_weight(k)


def stirling2(n, k):
    if k == 0:
        return 1 if n == 0 else 0
    if n == 0:
        return 0
    return k * stirling2(n - 1, k) + stirling2(n - 1, k - 1)


def brute_force_partitions(D, ell):
    D = sorted(D)
    out = set()
    for labels in itertools.product(range(ell), repeat=len(D)):
        if len(set(labels)) != ell:
            continue
        blocks = {}
        for x, lab in zip(D, labels):
            blocks.setdefault(lab, []).append(x)
        out.add(frozenset(tuple(b) for b in blocks.values()))
    return out


class TestPartitions:
    def test_single_block(self):
        assert partitions({1, 4}, 1) == [(tuple(sorted((1, 4))),)] or \
            len(partitions({1, 4}, 1)) == 1

    def test_two_singletons(self):
        parts = partitions({1, 2}, 2)
        assert len(parts) == 1

    def test_three_set_two_blocks(self):
        assert len(partitions({1, 2, 3}, 2)) == 3

    def test_counts_match_stirling(self):
        for n in range(1, 7):
            D = set(range(1, n + 1))
            for ell in range(1, n + 1):
                assert len(partitions(D, ell)) == stirling2(n, ell)

    def test_matches_brute_force(self):
        D = {1, 3, 5, 6}
        for ell in (1, 2, 3, 4):
            got = {frozenset(tuple(sorted(b)) for b in p)
                   for p in partitions(D, ell)}
            assert got == brute_force_partitions(D, ell)

    def test_bad_block_count(self):
        with pytest.raises(ValueError):
            partitions({1}, 0)


class TestTangentSystem:
    def test_m1_structure(self):
        spec = build_tangent_system(1)
        assert spec.n_components == 2
        terms = spec.components[0]
        assert [t[0] for t in terms] == [1]
        assert terms[0][1] == (1,)

    def test_m2_k3_has_one_second_order_term(self):
        spec = build_tangent_system(2)
        terms = spec.components[2]  # component k = 3
        orders = sorted(t[0] for t in terms)
        assert orders == [1, 2]
        second = [t for t in terms if t[0] == 2][0]
        assert sorted(second[1]) == [1, 2]

    def test_m3_k7_term_counts(self):
        spec = build_tangent_system(3)
        terms = spec.components[6]  # component k = 7
        from collections import Counter
        counts = Counter(t[0] for t in terms)
        assert counts[3] == 1 and counts[2] == 3 and counts[1] == 1

    def test_term_multiset_vs_brute_force(self):
        for m in (1, 2, 3):
            spec = build_tangent_system(m)
            for k in range(1, 2**m):
                D = digit_map(k)
                terms = spec.components[k - 1]
                for ell in range(2, hamming_weight(k) + 1):
                    expect = brute_force_partitions(D, ell)
                    got = [t for t in terms if t[0] == ell]
                    assert len(got) == len(expect)
                    for _, args in got:
                        blocks = frozenset(tuple(sorted(digit_map(a)))
                                           for a in args)
                        assert blocks in expect


class TestShooting:
    def test_e1_stable_closed_form(self, e1):
        half = shoot_stable(e1, [0.5], 10.0, h_max=0.02)
        assert half.residual <= 1e-10
        s = half.grid.nodes
        assert np.max(np.abs(half.head.samples[:, 0]
                             - 0.5 * np.exp(-s))) <= 5e-5
        assert np.max(np.abs(half.head.samples[:, 1])) <= 1e-12

    def test_e1_unstable_closed_form(self, e1):
        half = shoot_unstable(e1, [0.5], 10.0, h_max=0.02)
        assert half.residual <= 1e-10
        s = half.grid.nodes
        assert np.max(np.abs(half.head.samples[:, 1]
                             - 0.5 * np.exp(s))) <= 5e-5
        assert np.max(np.abs(half.head.samples[:, 0])) <= 1e-12

    def test_zero_seed_gives_constant_zero(self, c1):
        for shoot in (shoot_stable, shoot_unstable):
            half = shoot(c1, [0.0], 8.0)
            assert np.max(np.abs(half.head.samples)) <= 1e-12

    def test_c1_stable_decay(self, c1, cc):
        S = 12.0
        half = shoot_stable(c1, [0.3], S)
        assert half.residual <= 1e-9
        fit = decay_fit(half, (2.0, S - 2.0))
        assert fit.rate >= 0.9 * cc.sigma
        assert fit.r2 >= 0.99

    def test_c1_unstable_tail_bound(self, c1, cc):
        S = 12.0
        half = shoot_unstable(c1, [0.3], S)
        assert half.residual <= 1e-9
        assert np.linalg.norm(half.head.samples[0]) <= \
            2 * 0.3 * np.exp(-0.9 * cc.sigma * S)


class TestTangentLift:
    def test_e1_m1_closed_form(self, e1):
        base = shoot_stable(e1, [0.5], 8.0)
        lift = solve_tangent_lift(e1, base, build_tangent_system(1), [[1.0]])[0]
        s = base.grid.nodes
        assert np.max(np.abs(lift.samples[:, 0] - np.exp(-s))) <= 5e-5
        assert np.max(np.abs(lift.samples[:, 1])) <= 1e-12

    def test_zero_seeds_give_zero_components(self, c1):
        base = shoot_stable(c1, [0.3], 8.0)
        spec = build_tangent_system(2)
        lifts = solve_tangent_lift(c1, base, spec, [[0.0], [0.0], [0.0]])
        for lift in lifts:
            assert np.max(np.abs(lift.samples)) <= 1e-12

    def test_c1_m1_vs_finite_difference(self, c1):
        S, eps = 8.0, 1e-4
        base = shoot_stable(c1, [0.3], S)
        lift = solve_tangent_lift(c1, base, build_tangent_system(1), [[1.0]])[0]
        hp = shoot_stable(c1, [0.3 + eps], S)
        hm = shoot_stable(c1, [0.3 - eps], S)
        fd = (hp.head.samples - hm.head.samples) / (2 * eps)
        assert np.max(np.abs(lift.samples - fd)) <= 1e-5

    def test_c1_m2_vs_finite_difference(self, c1):
        S, eps = 8.0, 3e-3
        base = shoot_stable(c1, [0.3], S)
        spec = build_tangent_system(2)
        lifts = solve_tangent_lift(c1, base, spec, [[1.0], [1.0], [0.0]])
        hp = shoot_stable(c1, [0.3 + eps], S)
        hm = shoot_stable(c1, [0.3 - eps], S)
        fd2 = (hp.head.samples - 2 * base.head.samples
               + hm.head.samples) / eps**2
        assert np.max(np.abs(lifts[2].samples - fd2)) <= 1e-3

    def test_lift_decay(self, c1, cc):
        S = 12.0
        base = shoot_stable(c1, [0.2], S)
        spec = build_tangent_system(2)
        lifts = solve_tangent_lift(c1, base, spec, [[1.0], [1.0], [0.0]])
        for lift in lifts:
            fit = decay_fit(lift, (2.0, S - 2.0))
            assert fit.rate >= 0.9 * cc.sigma
            assert fit.r2 >= 0.99


class TestTheta:
    def test_identity_at_constant_base(self, c1):
        base = shoot_stable(c1, [0.0], 8.0)
        v = np.exp(-np.outer(base.grid.nodes, c1.a_plus))
        xi = DiscretePath(base.grid, np.concatenate(
            [v, np.zeros((base.grid.n_nodes, 1))], axis=1))
        # tol_lin loosened to the O(h^2) defect of sampling the closed form
        assert np.allclose(theta_identification(c1, base, xi, tol_lin=1e-4),
                           [1.0], atol=1e-6)

    def test_zero_maps_to_zero(self, c1):
        base = shoot_stable(c1, [0.3], 8.0)
        xi = DiscretePath(base.grid,
                          np.zeros((base.grid.n_nodes, 2)))
        assert np.allclose(theta_identification(c1, base, xi), 0.0)

    def test_roundtrip(self, c1):
        base = shoot_stable(c1, [0.3], 8.0)
        xi, _ = theta_inverse(c1, base, [0.7])
        assert np.allclose(theta_identification(c1, base, xi), [0.7],
                           atol=1e-6)

    def test_linearity(self, c1):
        base = shoot_stable(c1, [0.3], 8.0)
        spec = build_tangent_system(1)
        xi1 = solve_tangent_lift(c1, base, spec, [[1.0]])[0]
        xi2 = solve_tangent_lift(c1, base, spec, [[-0.4]])[0]
        combo = DiscretePath(base.grid,
                             2.0 * xi1.samples + 3.0 * xi2.samples)
        lhs = theta_identification(c1, base, combo)
        rhs = 2.0 * theta_identification(c1, base, xi1) \
            + 3.0 * theta_identification(c1, base, xi2)
        assert np.max(np.abs(lhs - rhs)) <= 1e-8


class TestDecayFit:
    def test_pure_exponential(self):
        g = make_grid(0.0, 10.0, 0.02)
        p = path_from_function(g, lambda s: np.exp(-s))
        fit = decay_fit(p, (1.0, 9.0))
        assert fit.rate == pytest.approx(1.0, abs=1e-3)
        assert fit.r2 >= 0.9999

    def test_e1_stable_trajectory(self, e1):
        half = shoot_stable(e1, [0.5], 10.0)
        fit = decay_fit(half, (2.0, 8.0))
        assert fit.rate >= 0.999

    def test_rate_inheritance_from_forcing(self):
        # xi' + (1 + e^{-s}) xi = e^{-s/2}: the slowly decaying forcing sets
        # the asymptotic rate of the solution
        def rhs(s, y):
            return -(1 + np.exp(-s)) * y + np.exp(-0.5 * s)

        g = make_grid(0.0, 24.0, 0.02)
        sol = solve_ivp(rhs, (0.0, 24.0), [0.3], t_eval=g.nodes,
                        rtol=1e-10, atol=1e-12)
        p = DiscretePath(g, sol.y.T)
        fit = decay_fit(p, (12.0, 23.0))
        assert fit.rate >= 0.5 * (1 - 0.02)
        assert fit.rate <= 0.6
