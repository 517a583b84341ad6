import math

import numpy as np
import pytest
import torch

from polsurf.polconstraint import (DELTA_DIFFUSE, DELTA_SPECULAR,
                                   DegenerateConstraintError,
                                   DegenerateViewError, aop_from_normal,
                                   aop_from_normal_masked, coeff_ortho,
                                   coeff_persp, f_persp, f_persp_masked,
                                   h_ortho, h_persp)


def rand_units(rng, n, forward_z=False):
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    if forward_z:
        v[:, 2] = np.abs(v[:, 2]) + 0.05
        v /= np.linalg.norm(v, axis=-1, keepdims=True)
    return torch.from_numpy(v)


class TestCoeff:
    @pytest.mark.parametrize("phi,delta,expected", [
        (0.0, 0.0, [0.0, 1.0, 0.0]),
        (0.0, math.pi / 2, [1.0, 0.0, 0.0]),
        (math.pi / 4, 0.0, [math.sqrt(2) / 2, math.sqrt(2) / 2, 0.0]),
    ])
    def test_ortho_examples(self, phi, delta, expected):
        np.testing.assert_allclose(coeff_ortho(phi, delta).numpy(), expected, atol=1e-15)

    def test_persp_tilted_example(self):
        v = [0.0, math.sin(math.radians(10)), math.cos(math.radians(10))]
        a = coeff_persp(0.0, 0.0, v)
        np.testing.assert_allclose(
            a.numpy(), [0.0, math.cos(math.radians(10)), -math.sin(math.radians(10))],
            atol=1e-15)

    def test_persp_central_ray_bit_exact_ortho(self):
        # 1-degree grid over phi, both offsets: exact equality required
        phis = torch.arange(-90.0, 90.0) * (math.pi / 180.0)
        v = torch.tensor([0.0, 0.0, 1.0]).expand(len(phis), 3)
        for delta in (DELTA_DIFFUSE, DELTA_SPECULAR):
            ap = coeff_persp(phis, delta, v)
            ao = coeff_ortho(phis, delta)
            assert torch.equal(ap, ao)

    def test_persp_degenerate_raises(self):
        # v_z = 0 and v parallel to the AoP direction collapses the coefficient
        with pytest.raises(DegenerateConstraintError):
            coeff_persp(0.0, 0.0, [1.0, 0.0, 0.0])

    def test_persp_orthogonal_to_oracle_normal(self):
        rng = np.random.default_rng(11)
        n = rand_units(rng, 200)
        v = rand_units(rng, 200, forward_z=True)
        for delta in (DELTA_DIFFUSE, DELTA_SPECULAR):
            phi = aop_from_normal(n, v, delta)
            a = coeff_persp(phi, delta, v, strict=False)
            dots = (a * n).sum(-1).abs().numpy()
            assert dots.max() < 1e-12


class TestKernels:
    @pytest.mark.parametrize("phi,n,expected", [
        (0.0, [1.0, 0.0, 0.0], 0.0),
        (0.0, [0.0, 1.0, 0.0], 1.0),
        (math.pi / 4, [math.sqrt(2) / 2, -math.sqrt(2) / 2, 0.0], 0.0),
    ])
    def test_h_ortho_examples(self, phi, n, expected):
        assert float(h_ortho(phi, 0.0, n)) == pytest.approx(expected, abs=1e-15)

    def test_h_persp_reduces_to_ortho(self):
        rng = np.random.default_rng(3)
        n = rand_units(rng, 300)
        v = torch.tensor([0.0, 0.0, 1.0]).expand(300, 3)
        phi = torch.from_numpy(rng.uniform(-np.pi / 2, np.pi / 2, 300))
        for delta in (DELTA_DIFFUSE, DELTA_SPECULAR):
            np.testing.assert_allclose(h_persp(phi, delta, v, n).numpy(),
                                       h_ortho(phi, delta, n).numpy(), atol=1e-15)

    def test_h_persp_bounded_by_one(self):
        rng = np.random.default_rng(5)
        n = rand_units(rng, 2000)
        v = rand_units(rng, 2000, forward_z=True)
        phi = torch.from_numpy(rng.uniform(-np.pi, np.pi, 2000))
        h = h_persp(phi, DELTA_SPECULAR, v, n)
        assert float(h.min()) >= 0.0 and float(h.max()) <= 1.0 + 1e-12

    def test_pi_periodicity(self):
        rng = np.random.default_rng(6)
        n = rand_units(rng, 500)
        v = rand_units(rng, 500, forward_z=True)
        phi = torch.from_numpy(rng.uniform(-np.pi / 2, np.pi / 2, 500))
        for delta in (DELTA_DIFFUSE, DELTA_SPECULAR):
            base = h_persp(phi, delta, v, n)
            for shift in (np.pi, -np.pi):
                np.testing.assert_allclose(h_persp(phi + shift, delta, v, n).numpy(),
                                           base.numpy(), atol=1e-12)

    def test_half_pi_swap(self):
        # shifting phi by pi/2 while toggling the offset leaves h unchanged
        rng = np.random.default_rng(7)
        n = rand_units(rng, 500)
        v = rand_units(rng, 500, forward_z=True)
        phi = torch.from_numpy(rng.uniform(-np.pi / 2, np.pi / 2, 500))
        a = h_persp(phi, DELTA_DIFFUSE, v, n)
        b = h_persp(phi + np.pi / 2, DELTA_SPECULAR, v, n)
        np.testing.assert_allclose(a.numpy(), b.numpy(), atol=1e-12)
        c = h_persp(phi, DELTA_SPECULAR, v, n)
        d = h_persp(phi + np.pi / 2, DELTA_DIFFUSE, v, n)
        np.testing.assert_allclose(c.numpy(), d.numpy(), atol=1e-12)

    def test_renormalizes_off_unit_normal(self):
        n = torch.tensor([[0.0, 2.0, 0.0]])
        v = torch.tensor([[0.0, 0.0, 1.0]])
        assert float(h_persp(torch.zeros(1), 0.0, v, n)) == pytest.approx(1.0, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        n0 = rand_units(rng, 40)
        v = rand_units(rng, 40, forward_z=True)
        phi = torch.from_numpy(rng.uniform(-np.pi / 2, np.pi / 2, 40))
        n = n0.clone().requires_grad_(True)
        h_persp(phi, DELTA_SPECULAR, v, n).sum().backward()
        step = 1e-5
        for k in range(3):
            e = torch.zeros(3, dtype=torch.float64)
            e[k] = step
            hp = h_persp(phi, DELTA_SPECULAR, v, n0 + e).sum()
            hm = h_persp(phi, DELTA_SPECULAR, v, n0 - e).sum()
            fd = float((hp - hm) / (2 * step))
            an = float(n.grad[:, k].sum())
            assert abs(an - fd) / max(abs(fd), 1e-8) < 1e-4


class TestSegmentedLoss:
    def test_specular_branch_zero_at_oracle(self):
        rng = np.random.default_rng(13)
        n = rand_units(rng, 100)
        v = rand_units(rng, 100, forward_z=True)
        phi = aop_from_normal(n, v, DELTA_SPECULAR)
        f = f_persp(phi, v, n, torch.full((100,), 0.9), 0.3)
        assert float(f.abs().max()) < 1e-12

    def test_diffuse_factor_annihilates_product(self):
        rng = np.random.default_rng(14)
        n = rand_units(rng, 100)
        v = rand_units(rng, 100, forward_z=True)
        phi = aop_from_normal(n, v, DELTA_DIFFUSE)
        f = f_persp(phi, v, n, torch.full((100,), 0.1), 0.3)
        assert float(f.abs().max()) < 1e-12

    def test_product_value_one_quarter(self):
        # [oracle] brute-force search over the unit sphere for a normal whose
        # diffuse and specular factors are both 1/2, frozen here
        v = torch.tensor([0.0, 0.0, 1.0])
        phi = torch.tensor(0.0)
        best, best_err = None, np.inf
        rng = np.random.default_rng(0)
        cand = rand_units(rng, 200000)
        hd = h_persp(phi.expand(len(cand)), DELTA_DIFFUSE,
                     v.expand(len(cand), 3), cand)
        hs = h_persp(phi.expand(len(cand)), DELTA_SPECULAR,
                     v.expand(len(cand), 3), cand)
        err = (hd - 0.5).abs() + (hs - 0.5).abs()
        i = int(err.argmin())
        best, best_err = cand[i], float(err[i])
        assert best_err < 1e-2
        f = f_persp(phi, v, best, torch.tensor(0.1), 0.3)
        assert float(f) == pytest.approx(0.25, abs=0.01)
        # the exact construction: normal at 45 degrees to both constraint planes
        exact = torch.tensor([math.sqrt(0.5), math.sqrt(0.5), 0.0], dtype=torch.float64)
        f_exact = f_persp(phi, v, exact, torch.tensor(0.1), 0.3)
        assert float(f_exact) == pytest.approx(0.25, abs=1e-12)

    def test_branch_switch_at_threshold(self):
        v = torch.tensor([0.0, 0.0, 1.0])
        n = torch.tensor([math.sqrt(0.5), math.sqrt(0.5), 0.0], dtype=torch.float64)
        phi = torch.tensor(0.0)
        below = float(f_persp(phi, v, n, torch.tensor(0.29), 0.3))
        at = float(f_persp(phi, v, n, torch.tensor(0.30), 0.3))
        assert below == pytest.approx(0.25, abs=1e-12)   # product branch
        assert at == pytest.approx(0.5, abs=1e-12)       # specular branch only

    def test_masked_variant_flags_degenerate(self):
        v = torch.tensor([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        n = torch.tensor([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
        phi = torch.zeros(2)
        rho = torch.full((2,), 0.9)
        f, valid = f_persp_masked(phi, v, n, rho, 0.3)
        assert not bool(valid[0]) and bool(valid[1])
        assert float(f[0]) == 0.0

    def test_nonnegative(self):
        rng = np.random.default_rng(15)
        n = rand_units(rng, 1000)
        v = rand_units(rng, 1000, forward_z=True)
        phi = torch.from_numpy(rng.uniform(-np.pi / 2, np.pi / 2, 1000))
        rho = torch.from_numpy(rng.uniform(0, 1, 1000))
        assert float(f_persp(phi, v, n, rho, 0.3).min()) >= 0.0


class TestAopOracle:
    def test_plus_y_normal_central_ray(self):
        phi = aop_from_normal([0.0, 1.0, 0.0], [0.0, 0.0, 1.0], 0.0)
        assert float(h_ortho(phi, 0.0, [0.0, 1.0, 0.0])) < 1e-15

    def test_plus_x_normal_closure(self):
        phi = aop_from_normal([1.0, 0.0, 0.0], [0.0, 0.0, 1.0], 0.0)
        assert float(h_persp(phi, 0.0, [0.0, 0.0, 1.0], [1.0, 0.0, 0.0])) < 1e-15

    def test_range(self):
        rng = np.random.default_rng(21)
        n = rand_units(rng, 1000)
        v = rand_units(rng, 1000, forward_z=True)
        for delta in (DELTA_DIFFUSE, DELTA_SPECULAR):
            phi = aop_from_normal(n, v, delta)
            assert float(phi.min()) >= -np.pi / 2 - 1e-12
            assert float(phi.max()) <= np.pi / 2 + 1e-12

    def test_randomized_closure(self):
        rng = np.random.default_rng(23)
        n = rand_units(rng, 1000)
        v = rand_units(rng, 1000, forward_z=True)
        for delta in (DELTA_DIFFUSE, DELTA_SPECULAR):
            phi = aop_from_normal(n, v, delta)
            h = h_persp(phi, delta, v, n)
            assert float(h.max()) < 1e-12

    def test_degenerate_view_raises(self):
        with pytest.raises(DegenerateViewError):
            aop_from_normal([0.0, 0.0, 1.0], [0.0, 0.0, 1.0], 0.0)

    def test_masked_variant_flags_parallel(self):
        n = torch.tensor([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
        v = torch.tensor([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
        phi, valid = aop_from_normal_masked(n, v, 0.0)
        assert not bool(valid[0]) and bool(valid[1])
