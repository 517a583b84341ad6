import numpy as np
import pytest
import torch

from conftest import AnalyticSphereField
from polsurf import trainer
from polsurf.polconstraint import aop_from_normal
from polsurf.trainer import (ScheduleConfig, TrainConfig, config_from_text,
                             config_to_text, criss_cross_offsets, desk_preset,
                             loss_color, loss_eikonal, loss_mask, loss_normal,
                             loss_pol, paper_preset, sample_plan)


class TestVariants:
    def test_all_six_reachable(self):
        expected = {"pisr", "pisr-c", "pisr-n", "pisr-o", "pisr-on", "pisr-p"}
        assert set(trainer.VARIANTS) == expected
        for v in expected:
            TrainConfig(variant=v)

    def test_unknown_variant_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(variant="pisr-x")

    def test_variant_switches(self):
        assert TrainConfig(variant="pisr").pol_kernel == "persp"
        assert TrainConfig(variant="pisr").use_normal_loss
        assert TrainConfig(variant="pisr-c").pol_kernel is None
        assert TrainConfig(variant="pisr-o").pol_kernel == "ortho"
        assert not TrainConfig(variant="pisr-p").use_normal_loss


class TestSchedule:
    def test_full_scale_trace(self):
        s = ScheduleConfig()  # 2500/2500/2500 stages
        assert s.weights(0) == (0.0, 0.0, 0)
        assert s.weights(2499) == (0.0, 0.0, 0)
        lp, ln, nu = s.weights(5000)
        assert lp == 2.0 and ln == 1.0 and nu == 28
        lp, ln, nu = s.weights(3750)  # mid-ramp
        assert lp == pytest.approx(1.0) and ln == pytest.approx(0.5)
        lp, ln, nu = s.weights(7500)  # after decay
        assert lp == 2.0 and ln == 0.0 and nu == 0
        lp, ln, _ = s.weights(6250)  # mid-decay: lambda_p holds its peak
        assert lp == 2.0 and ln == pytest.approx(0.5)

    def test_neighbor_count_always_divisible_by_four(self):
        s = ScheduleConfig(warmup=100, ramp=100, decay=100)
        for it in range(0, 400, 7):
            assert s.weights(it)[2] % 4 == 0


class TestSamplePlan:
    def test_offsets_28_gives_arm_7(self):
        offs = criss_cross_offsets(28)
        assert len(offs) == 28
        for axis in (0, 1):
            vals = sorted(offs[offs[:, 1 - axis] == 0][:, axis])
            assert vals == list(range(-7, 0)) + list(range(1, 8))

    def test_offsets_must_be_divisible_by_four(self):
        with pytest.raises(ValueError):
            criss_cross_offsets(6)

    def test_zero_neighbors_returns_centers_only(self):
        rng = np.random.default_rng(0)
        cand = np.array([[0, 5, 5], [0, 6, 6]])
        plan = sample_plan(rng, cand, [(16, 16)], 4, 0)
        assert len(plan.centers) == 4 and len(plan.neighbors) == 0

    def test_all_pixels_inside_bounds(self):
        rng = np.random.default_rng(1)
        cand = np.stack([np.zeros(50, dtype=np.int64),
                         rng.integers(0, 16, 50), rng.integers(0, 16, 50)], -1)
        plan = sample_plan(rng, cand, [(16, 16)], 20, 28)
        nb = plan.neighbors
        assert np.all((nb[:, 1] >= 0) & (nb[:, 1] < 16))
        assert np.all((nb[:, 2] >= 0) & (nb[:, 2] < 16))

    def test_border_center_clipped(self):
        rng = np.random.default_rng(2)
        cand = np.array([[0, 0, 0]])  # corner pixel: half of each arm clipped
        plan = sample_plan(rng, cand, [(16, 16)], 1, 8)
        assert len(plan.neighbors) == 4  # only +u and +v survive
        assert np.all(plan.neighbor_center == 0)


class TestLosses:
    def test_color_zero_when_equal(self):
        c = torch.rand(10, 3)
        assert float(loss_color(c, c)) == 0.0

    def test_color_single_channel_offset(self):
        c = torch.rand(10, 3)
        pred = c.clone()
        pred[:, 0] += 0.1
        assert float(loss_color(pred, c)) == pytest.approx(0.1 / 3, abs=1e-7)

    def test_pol_zero_on_oracle_normals(self):
        rng = np.random.default_rng(3)
        n = torch.from_numpy(rng.standard_normal((50, 3)))
        n /= n.norm(dim=-1, keepdim=True)
        v = torch.from_numpy(np.tile([0.1, -0.05, 0.99], (50, 1)))
        v /= v.norm(dim=-1, keepdim=True)
        phi = aop_from_normal(n, v, 0.0)
        rho = torch.full((50,), 0.15)
        val, degen = loss_pol(phi, rho, v, n, theta=0.3)
        assert float(val) < 1e-10 and degen == 0

    def test_pol_positive_for_rotated_normal(self):
        n = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)
        v = torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64)
        phi = aop_from_normal(n, v, np.pi / 2)
        # rotate the normal 90 degrees about the viewing ray
        n_rot = torch.tensor([[0.0, 1.0, 0.0]], dtype=torch.float64)
        val, _ = loss_pol(phi, torch.tensor([0.6]), v, n_rot, theta=0.3)
        assert float(val) > 0.9

    def test_pol_all_degenerate_counted(self):
        # normals parallel to z with rays along z: ortho kernel fine, but a
        # sideways ray with v_z=0 and matching AoP direction degenerates
        v = torch.tensor([[1.0, 0.0, 0.0]] * 4, dtype=torch.float64)
        n = torch.tensor([[0.0, 0.0, 1.0]] * 4, dtype=torch.float64)
        phi = torch.zeros(4, dtype=torch.float64)
        val, degen = loss_pol(phi, torch.full((4,), 0.6), v, n, theta=0.3)
        assert float(val) == 0.0 and degen == 4

    def test_pol_ortho_kernel_selectable(self):
        n = torch.tensor([[0.0, 1.0, 0.0]], dtype=torch.float64)
        v = torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64)
        val, _ = loss_pol(torch.zeros(1, dtype=torch.float64), torch.tensor([0.6]),
                          v, n, theta=0.3, kernel="ortho")
        assert float(val) == pytest.approx(0.0, abs=1e-12)

    def test_pol_forced_delta_changes_branch(self):
        rng = np.random.default_rng(4)
        n = torch.from_numpy(rng.standard_normal((30, 3)))
        n /= n.norm(dim=-1, keepdim=True)
        v = torch.tensor([[0.0, 0.0, 1.0]] * 30, dtype=torch.float64)
        phi = aop_from_normal(n, v, np.pi / 2)  # specular-consistent AoP
        rho = torch.full((30,), 0.6)
        right, _ = loss_pol(phi, rho, v, n, theta=0.3)
        wrong, _ = loss_pol(phi, rho, v, n, theta=0.3, forced_delta=0.0)
        assert float(right) < 1e-10
        assert float(wrong) > float(right)

    def test_pol_low_dop_exclusion(self):
        # n = +x with phi = 0: specular branch h = 1, diffuse product h = 0
        n = torch.tensor([[1.0, 0.0, 0.0]] * 2, dtype=torch.float64)
        v = torch.tensor([[0.0, 0.0, 1.0]] * 2, dtype=torch.float64)
        phi = torch.zeros(2, dtype=torch.float64)
        rho = torch.tensor([0.05, 0.6])
        with_all, _ = loss_pol(phi, rho, v, n, theta=0.3)
        excl, _ = loss_pol(phi, rho, v, n, theta=0.3, exclude_dop_below=0.1)
        # second pixel: specular branch h=1; first pixel product branch
        assert float(excl) == pytest.approx(1.0, abs=1e-12)
        assert float(with_all) < float(excl)

    def test_normal_identical_is_minus_one(self):
        n = torch.tensor([[0.0, 0.0, 1.0]])
        nb = n.repeat(4, 1)
        idx = torch.zeros(4, dtype=torch.int64)
        assert float(loss_normal(n, nb, idx)) == pytest.approx(-1.0)

    def test_normal_orthogonal_is_zero(self):
        n = torch.tensor([[0.0, 0.0, 1.0]])
        nb = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        idx = torch.zeros(2, dtype=torch.int64)
        assert float(loss_normal(n, nb, idx)) == pytest.approx(0.0, abs=1e-7)

    def test_normal_stop_gradient_on_centers(self):
        # the center branch is severed: with constant neighbors the loss has
        # no gradient path at all to the center parameters
        p = torch.tensor([0.3, 0.2, 0.9], requires_grad=True)
        nb = torch.tensor([[0.0, 0.1, 0.95], [0.05, 0.0, 0.9]])
        idx = torch.zeros(2, dtype=torch.int64)
        loss = loss_normal(p[None], nb, idx)
        assert not loss.requires_grad
        # with live neighbors, backward leaves the center parameter untouched
        q = nb.clone().requires_grad_(True)
        loss_normal(p[None], q, idx).backward()
        assert p.grad is None
        assert float(q.grad.abs().sum()) > 0.0

    def test_normal_gradient_reaches_neighbors(self):
        p = torch.tensor([[0.0, 0.1, 0.95]], requires_grad=True)
        c = torch.tensor([[0.3, 0.2, 0.9]])
        loss_normal(c, p, torch.zeros(1, dtype=torch.int64)).backward()
        assert float(p.grad.abs().sum()) > 0.0

    def test_normal_empty_neighbors_zero(self):
        c = torch.tensor([[0.0, 0.0, 1.0]])
        val = loss_normal(c, torch.zeros(0, 3), torch.zeros(0, dtype=torch.int64))
        assert float(val) == 0.0

    def test_eikonal_sphere_oracle(self):
        field = AnalyticSphereField(radius=0.35)
        x = torch.randn(300, 3) * 0.25
        x = x[x.norm(dim=-1) > 0.1]
        g = field.sdf_gradient(x).norm(dim=-1)
        assert float(loss_eikonal(g)) < 1e-3

    def test_eikonal_doubled_field(self):
        field = AnalyticSphereField(radius=0.35)
        x = torch.randn(300, 3) * 0.25
        x = x[x.norm(dim=-1) > 0.1]
        g = 2.0 * field.sdf_gradient(x).norm(dim=-1)
        assert float(loss_eikonal(g)) == pytest.approx(1.0, abs=0.05)

    def test_mask_loss_prefers_agreement(self):
        m = torch.tensor([1.0, 0.0])
        good = loss_mask(torch.tensor([0.99, 0.01]), m)
        bad = loss_mask(torch.tensor([0.01, 0.99]), m)
        assert float(good) < float(bad)


class TestConfigText:
    def test_round_trip(self):
        cfg = desk_preset(variant="pisr-on", seed=3, theta=0.25,
                          background=(0.1, 0.1, 0.1))
        back = config_from_text(config_to_text(cfg))
        assert back == cfg

    def test_comments_and_blanks_ignored(self):
        text = config_to_text(TrainConfig()) + "\n# trailing comment\n\n"
        assert config_from_text(text) == TrainConfig()

    def test_paper_preset_values(self):
        cfg = paper_preset()
        assert cfg.max_iterations == 20000
        assert cfg.batch_pixels == 4096
        assert cfg.schedule.warmup == 2500
        assert cfg.grid.table_size == 2 ** 19
        assert cfg.grid.coarsest_res == 32 and cfg.grid.finest_res == 2700
        assert cfg.level_interval == 1000

    def test_desk_preset_overrides(self):
        cfg = desk_preset(max_iterations=100)
        assert cfg.max_iterations == 100 and cfg.variant == "pisr"
