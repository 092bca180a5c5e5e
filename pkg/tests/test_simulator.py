import numpy as np
import pytest

from contactest.geometry import DiskSdf, RectangleSdf
from contactest.simulator import (GH, MU, PW, SCALE, ContactPoint, SimConfig,
                                  Simulator, StepError)
from conftest import THETA_DISK_FLOOR


def _theta(**overrides):
    theta = THETA_DISK_FLOOR.copy()
    names = {"tx": 2, "tz": 3, "tphi": 4, "s": SCALE, "mu": MU, "gh": GH,
             "pw": PW}
    for key, value in overrides.items():
        theta[names[key]] = value
    return theta


class TestDetectContacts:
    def test_free_space(self, disk_sim):
        assert disk_sim.detect_contacts(
            THETA_DISK_FLOOR, np.array([0.0, 0.10, 0.0])) == []

    def test_tangency_single_contact(self, disk_sim):
        cts = disk_sim.detect_contacts(
            THETA_DISK_FLOOR, np.array([0.0, 0.0505, 0.0]))
        assert len(cts) == 1
        assert cts[0].phi == pytest.approx(0.0005, abs=1e-9)
        np.testing.assert_array_equal(cts[0].normal, [0.0, 1.0])

    def test_corner_two_contacts(self, disk_sim):
        theta = _theta(pw=0.12)
        cts = disk_sim.detect_contacts(
            theta, np.array([0.12 - 0.0505, 0.0505, 0.0]))
        assert len(cts) == 2
        normals = sorted(tuple(c.normal) for c in cts)
        assert normals == [(-1.0, 0.0), (0.0, 1.0)]

    def test_flat_face_keeps_separated_contacts(self, square_sim):
        cts = square_sim.detect_contacts(
            THETA_DISK_FLOOR, np.array([0.0, 0.0405, 0.0]))
        assert 2 <= len(cts) <= 8
        xs = np.array(sorted(c.p_world[0] for c in cts))
        assert np.all(np.diff(xs) >= 0.005 - 1e-9)

    def test_cap_at_eight(self, disk_sim):
        # deep penetration wakes many separated clusters on a large disk
        theta = _theta(s=1.2)
        cts = disk_sim.detect_contacts(theta, np.array([0.0, 0.03, 0.0]))
        assert len(cts) <= 8


class TestStep:
    def test_free_space_identity_exact(self, disk_sim):
        x, w = disk_sim.step(THETA_DISK_FLOOR, np.array([0.0, 0.10, 0.0]),
                             np.array([0.01, 0.10, 0.0]))
        np.testing.assert_array_equal(x, [0.01, 0.10, 0.0])
        np.testing.assert_array_equal(w, [0.0, 0.0, 0.0])

    @pytest.mark.parametrize("delta_mm", [2, 5, 10])
    def test_press_statics(self, disk_sim, delta_mm):
        delta = delta_mm * 1e-3
        target = np.array([0.0, 0.05 - delta, 0.0])
        x, w = disk_sim.step(THETA_DISK_FLOOR, np.array([0.0, 0.05, 0.0]),
                             target)
        x, w = disk_sim.step(THETA_DISK_FLOOR, x, target)
        assert w[1] == pytest.approx(100.0 * delta, abs=1e-3)
        assert x[1] == pytest.approx(0.05, abs=1e-6)

    def test_sliding_coulomb_statics(self, disk_sim):
        target = np.array([0.02, 0.04, 0.0])
        x = np.array([0.0, 0.05, 0.0])
        for _ in range(3):
            x, w = disk_sim.step(THETA_DISK_FLOOR, x, target)
        assert x[0] == pytest.approx(0.02 - 0.3 / 100.0, abs=1e-4)
        assert x[1] == pytest.approx(0.05, abs=1e-4)
        assert w[0] == pytest.approx(-0.3, abs=1e-3)
        assert w[1] == pytest.approx(1.0, abs=1e-3)

    def test_determinism(self, disk_sim):
        theta = _theta(mu=0.55, gh=0.004)
        pose = np.array([0.003, 0.052, 0.01])
        cmd = np.array([0.012, 0.041, -0.02])
        a = disk_sim.step(theta, pose, cmd)
        b = disk_sim.step(theta, pose, cmd)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_step_matches_batch_row(self, disk_sim):
        thetas = np.stack([_theta(mu=0.2), _theta(mu=0.7, gh=-0.01)])
        pose = np.array([0.0, 0.052, 0.0])
        cmd = np.array([0.008, 0.045, 0.0])
        poses, wrenches, ok, _ = disk_sim.step_batch(thetas, pose, cmd)
        assert ok.all()
        for i, theta in enumerate(thetas):
            x, w = disk_sim.step(theta, pose, cmd)
            np.testing.assert_allclose(x, poses[i], atol=1e-12)
            np.testing.assert_allclose(w, wrenches[i], atol=1e-12)

    def test_h_refinement_consistency_frictionless(self):
        theta = _theta(mu=0.0)
        pose = np.array([0.0, 0.052, 0.0])
        cmd = np.array([0.01, 0.042, 0.0])
        coarse = Simulator(DiskSdf(0.05), SimConfig(h=0.1, n_sub=5))
        fine = Simulator(DiskSdf(0.05), SimConfig(h=0.05, n_sub=10))
        xa, _ = coarse.step(theta, pose, cmd)
        xb, _ = fine.step(theta, pose, cmd)
        assert np.abs(xa - xb).max() < 1e-6


class TestQpApi:
    def test_no_contact_minimum(self, disk_sim):
        pose = np.array([0.0, 0.10, 0.0])
        target = np.array([0.01, 0.09, 0.0])
        sol = disk_sim.build_and_solve_qp([], pose, target,
                                          THETA_DISK_FLOOR)
        np.testing.assert_allclose(
            sol.v, (target - pose) / disk_sim.cfg.h, atol=1e-9)
        assert sol.lambdas.shape == (0, 2)

    def test_kkt_residual_reported(self, disk_sim):
        cts = disk_sim.detect_contacts(THETA_DISK_FLOOR,
                                       np.array([0.0, 0.0505, 0.0]))
        sol = disk_sim.build_and_solve_qp(
            cts, np.array([0.0, 0.0505, 0.0]), np.array([0.0, 0.045, 0.0]),
            THETA_DISK_FLOOR)
        assert sol.kkt_residual <= 1e-6
        assert np.all(sol.lambdas >= 0.0)

    def test_frictionless_generator_symmetry(self, disk_sim):
        theta = _theta(mu=0.0)
        pose = np.array([0.0, 0.0502, 0.0])
        cts = disk_sim.detect_contacts(theta, pose)
        assert len(cts) == 1
        sol = disk_sim.build_and_solve_qp(
            cts, pose, np.array([0.0, 0.042, 0.0]), theta)
        assert sol.lambdas[0, 0] == pytest.approx(sol.lambdas[0, 1],
                                                  abs=1e-10)
        w = sol.wrench
        assert w.fx == pytest.approx(0.0, abs=1e-8)
        assert w.fz > 0.0


class TestRecoverWrench:
    def test_empty_contacts(self, disk_sim):
        sol = disk_sim.build_and_solve_qp(
            [], np.zeros(3), np.zeros(3), THETA_DISK_FLOOR)
        w = sol.wrench
        assert (w.fx, w.fz, w.tau) == (0.0, 0.0, 0.0)

    def test_zero_lever_zero_torque(self, disk_sim):
        cp = ContactPoint(p_world=np.array([0.0, 0.0]),
                          normal=np.array([0.0, 1.0]),
                          tangent=np.array([-1.0, 0.0]),
                          phi=0.0, lever=np.array([0.0, 0.0]), face=0,
                          mu=0.0)
        from contactest.simulator import QpSolution, Wrench
        h = disk_sim.cfg.h
        sol = QpSolution(v=np.zeros(3), lambdas=np.array([[0.5 * h, 0.5 * h]]),
                         wrench=Wrench(), kkt_residual=0.0, iterations=0)
        w = disk_sim.recover_wrench(sol, [cp])
        assert w.fx == pytest.approx(0.0)
        assert w.fz == pytest.approx(1.0)
        assert w.tau == pytest.approx(0.0)

    def test_offset_lever_torque(self, disk_sim):
        # f = (0, 1 N) applied 0.1 m in +x: tau = +0.1 N m
        cp = ContactPoint(p_world=np.array([0.1, 0.0]),
                          normal=np.array([0.0, 1.0]),
                          tangent=np.array([-1.0, 0.0]),
                          phi=0.0, lever=np.array([0.1, 0.0]), face=0,
                          mu=0.0)
        from contactest.simulator import QpSolution, Wrench
        h = disk_sim.cfg.h
        sol = QpSolution(v=np.zeros(3), lambdas=np.array([[0.5 * h, 0.5 * h]]),
                         wrench=Wrench(), kkt_residual=0.0, iterations=0)
        w = disk_sim.recover_wrench(sol, [cp])
        assert w.tau == pytest.approx(0.1)


def _random_scene_properties(sim, n_scenes, seed):
    """Solve randomized 0-2 contact scenes and return the property margins."""
    rng = np.random.default_rng(seed)
    records = []
    for _ in range(n_scenes):
        theta = _theta(mu=rng.uniform(0.1, 0.9),
                       gh=rng.uniform(-0.02, 0.02),
                       pw=rng.uniform(0.0, 0.14),
                       s=rng.uniform(0.8, 1.2),
                       tx=rng.uniform(-0.02, 0.02),
                       tz=rng.uniform(-0.02, 0.02),
                       tphi=rng.uniform(-0.2, 0.2))
        radius = 0.05 * theta[SCALE]
        # poses from free space down to slight penetration
        z = theta[GH] + radius + rng.uniform(-0.004, 0.02)
        x = theta[PW] - radius - rng.uniform(-0.002, 0.05)
        pose = np.array([x, z, rng.uniform(-0.1, 0.1)])
        records.append((theta, pose))
    return records


class TestContactProperties:
    def test_random_scene_invariants(self, disk_sim):
        records = _random_scene_properties(disk_sim, 200, seed=11)
        cfg = disk_sim.cfg
        h = cfg.h
        k_diag = np.asarray(cfg.stiffness)
        for theta, pose in records:
            cts = disk_sim.detect_contacts(theta, pose)
            target = pose + np.array([0.004, -0.006, 0.0])
            sol = disk_sim.build_and_solve_qp(cts, pose, target, theta)
            assert sol.kkt_residual <= 1e-6
            mu_f = theta[MU]
            forces = np.zeros(3)
            for i, cp in enumerate(cts):
                lam = sol.lambdas[i]
                assert np.all(lam >= -1e-12)
                # complementarity per generator row
                for sign, l_g in ((1.0, lam[0]), (-1.0, lam[1])):
                    d = cp.normal + sign * mu_f * cp.tangent
                    row = np.array([d[0], d[1],
                                    cp.lever[0] * d[1] - cp.lever[1] * d[0]])
                    slack = h * row @ sol.v + cp.phi
                    assert slack >= -1e-6
                    assert abs(l_g * slack) <= 1e-6
                f = (lam[0] * (cp.normal + mu_f * cp.tangent)
                     + lam[1] * (cp.normal - mu_f * cp.tangent)) / h
                f_n = f @ cp.normal
                f_t = f @ cp.tangent
                assert abs(f_t) <= mu_f * f_n + 1e-8
                forces[:2] += f
                forces[2] += cp.lever[0] * f[1] - cp.lever[1] * f[0]
            # force balance at the stepped pose
            x_next = pose + h * sol.v
            residual = k_diag * (target - x_next) + forces
            assert np.abs(residual[:2]).max() <= 1e-5
