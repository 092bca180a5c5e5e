import numpy as np
import pytest
import scipy.stats

from contactest import filtering as flt
from contactest.filtering import (FilterConfig, FilterDivergence,
                                  Observation, ParticleSet)
from contactest.simulator import GH, MU, PW
from conftest import THETA_DISK_FLOOR


CFG = FilterConfig(particles=64)


def _obs(pose=(0.0, 0.1, 0.0), wrench=(0.0, 0.0, 0.0)):
    return Observation(pose=np.asarray(pose, dtype=float),
                       wrench=np.asarray(wrench, dtype=float))


class StubSim:
    """Deterministic stand-in: echoes the command as the next pose and a
    wrench read off one theta dimension; selected rows can fail."""

    def __init__(self, fail_when=None, wrench_gain=0.0):
        self.fail_when = fail_when
        self.wrench_gain = wrench_gain

    def step_batch(self, thetas, pose, command):
        thetas = np.atleast_2d(thetas)
        b = len(thetas)
        poses = np.broadcast_to(np.asarray(command, dtype=float),
                                (b, 3)).copy()
        wrench = np.zeros((b, 3))
        wrench[:, 1] = self.wrench_gain * thetas[:, GH]
        ok = np.ones(b, dtype=bool)
        if self.fail_when is not None:
            ok &= ~self.fail_when(thetas)
        return poses, wrench, ok, np.zeros(b)


class TestInitParticles:
    def test_uniform_weights(self):
        ps = flt.init_particles(FilterConfig(particles=4),
                                np.random.default_rng(0))
        np.testing.assert_array_equal(ps.weights, [0.25] * 4)

    def test_prior_support(self):
        cfg = FilterConfig(particles=2000)
        ps = flt.init_particles(cfg, np.random.default_rng(1))
        assert np.all(ps.particles >= np.asarray(cfg.prior_low))
        assert np.all(ps.particles <= np.asarray(cfg.prior_high))
        assert np.all(ps.particles[:, GH] >= -0.02)
        assert np.all(ps.particles[:, GH] <= 0.02)

    def test_friction_marginal_uniform(self):
        cfg = FilterConfig(particles=5000)
        ps = flt.init_particles(cfg, np.random.default_rng(2))
        stat = scipy.stats.kstest(ps.particles[:, MU], "uniform",
                                  args=(0.1, 0.8))
        assert stat.pvalue > 0.01

    def test_empty_interval_rejected(self):
        with pytest.raises(ValueError):
            FilterConfig(prior_low=(0.0,) * 9, prior_high=(0.0,) * 9)


class TestLogLikelihood:
    def test_zero_residual(self):
        o = _obs()
        sigma = np.asarray(CFG.noise_std)
        want = -np.log(sigma * np.sqrt(2 * np.pi)).sum()
        assert flt.log_likelihood(o, o, CFG.noise_std) == pytest.approx(want)

    def test_one_sigma_force_residual(self):
        base = flt.log_likelihood(_obs(), _obs(), CFG.noise_std)
        got = flt.log_likelihood(_obs(wrench=(30.0, 0.0, 0.0)), _obs(),
                                 CFG.noise_std)
        assert got == pytest.approx(base - 0.5)

    def test_angle_wrap_symmetry(self):
        eps = 1e-3
        hi = flt.log_likelihood(_obs(pose=(0, 0.1, np.pi - eps)),
                                _obs(pose=(0, 0.1, 0.0)), CFG.noise_std)
        lo = flt.log_likelihood(_obs(pose=(0, 0.1, -np.pi + eps)),
                                _obs(pose=(0, 0.1, 0.0)), CFG.noise_std)
        assert hi == pytest.approx(lo)


class TestEffectiveSampleSize:
    def test_uniform(self):
        assert flt.effective_sample_size(
            np.full(5000, 1 / 5000)) == pytest.approx(5000)

    def test_degenerate(self):
        w = np.zeros(100)
        w[3] = 1.0
        assert flt.effective_sample_size(w) == pytest.approx(1.0)

    def test_two_hot(self):
        w = np.zeros(64)
        w[0] = w[1] = 0.5
        assert flt.effective_sample_size(w) == pytest.approx(2.0)


class TestResample:
    def test_uniform_weights_keep_everyone(self):
        m = 32
        ps = ParticleSet(np.arange(m, dtype=float)[:, None].repeat(9, 1),
                         np.full(m, 1 / m))
        out = flt.resample_systematic(ps, np.random.default_rng(3))
        assert sorted(out.particles[:, 0].tolist()) == list(range(m))

    def test_one_hot(self):
        ps = ParticleSet(np.arange(4, dtype=float)[:, None].repeat(9, 1),
                         np.array([1.0, 0.0, 0.0, 0.0]))
        out = flt.resample_systematic(ps, np.random.default_rng(4))
        assert np.all(out.particles[:, 0] == 0.0)

    def test_bracketed_counts(self):
        # 4 draws from weights (0.5, 0.25, 0.25): particle 0 exactly twice
        ps = ParticleSet(np.arange(3, dtype=float)[:, None].repeat(9, 1),
                         np.array([0.5, 0.25, 0.25]))
        for seed in range(20):
            out = flt.resample_systematic(ps, np.random.default_rng(seed),
                                          size=4)
            assert (out.particles[:, 0] == 0.0).sum() == 2

    def test_unbiased_copy_counts(self):
        m = 16
        rng = np.random.default_rng(5)
        w = rng.uniform(0.1, 1.0, m)
        w /= w.sum()
        ps = ParticleSet(np.arange(m, dtype=float)[:, None].repeat(9, 1), w)
        counts = np.zeros(m)
        n_rep = 1000
        for seed in range(n_rep):
            out = flt.resample_systematic(ps, np.random.default_rng(seed))
            for i in range(m):
                counts[i] += (out.particles[:, 0] == i).sum()
        mean_counts = counts / n_rep
        # systematic resampling: per-repeat count is floor/ceil of m*w
        se = 0.5 / np.sqrt(n_rep)
        assert np.all(np.abs(mean_counts - m * w) <= 3 * se + 1e-9)


class TestRoughen:
    def test_zero_roughness_identity(self):
        rng = np.random.default_rng(6)
        p = rng.uniform(-1, 1, (50, 9))
        out = flt.roughen(p, 0.0, np.ones(9), CFG.prior_low, CFG.prior_high,
                          rng)
        np.testing.assert_array_equal(out, p)

    def test_zero_variance_dimension_fixed(self):
        rng = np.random.default_rng(7)
        p = np.zeros((100, 9))
        p[:, MU] = 0.5
        var = np.ones(9) * 0.01
        var[MU] = 0.0
        out = flt.roughen(p, 0.3, var, CFG.prior_low, CFG.prior_high, rng)
        np.testing.assert_array_equal(out[:, MU], p[:, MU])

    def test_noise_variance_scale(self):
        rng = np.random.default_rng(8)
        n = 100_000
        p = np.zeros((n, 9))
        var = np.full(9, 0.04)
        out = flt.roughen(p, 0.3, var, [-10] * 9, [10] * 9, rng)
        got = out.var(axis=0)
        np.testing.assert_allclose(got, 0.3 * var, rtol=0.05)

    def test_clamped_to_prior(self):
        rng = np.random.default_rng(9)
        cfg = CFG
        p = np.tile(np.asarray(cfg.prior_high), (200, 1))
        out = flt.roughen(p, 1.0, np.ones(9), cfg.prior_low, cfg.prior_high,
                          rng)
        assert np.all(out <= np.asarray(cfg.prior_high))
        assert np.all(out >= np.asarray(cfg.prior_low))


class TestPfUpdate:
    def test_identical_particles_stay_uniform(self):
        m = 8
        ps = ParticleSet(np.tile(THETA_DISK_FLOOR, (m, 1)), np.full(m, 1 / m))
        sim = StubSim()
        obs = [_obs(), _obs(pose=(0.01, 0.1, 0.0))]
        out, info = flt.pf_update(ps, obs, [np.array([0.01, 0.1, 0.0])],
                                  CFG, sim, np.random.default_rng(0))
        np.testing.assert_allclose(out.weights, 1 / m)

    def test_two_particle_weight_ratio(self):
        # one particle matches exactly, the other has a 3-sigma f_z residual
        cfg = FilterConfig(particles=2, resample_frac=0.0)
        sigma = cfg.noise_std[1]
        p_good = THETA_DISK_FLOOR.copy()
        p_bad = THETA_DISK_FLOOR.copy()
        p_good[GH] = 0.0
        p_bad[GH] = 3.0 * sigma   # StubSim wrench_gain=1 maps GH to f_z
        ps = ParticleSet(np.stack([p_good, p_bad]), np.array([0.5, 0.5]))
        sim = StubSim(wrench_gain=1.0)
        obs = [_obs(), _obs(pose=(0.01, 0.1, 0.0))]
        out, _ = flt.pf_update(ps, obs, [np.array([0.01, 0.1, 0.0])],
                               cfg, sim, np.random.default_rng(0))
        ratio = out.weights[0] / out.weights[1]
        assert ratio == pytest.approx(np.exp(4.5), rel=1e-9)

    def test_failed_particles_get_zero_weight(self):
        cfg = FilterConfig(particles=4, resample_frac=0.0)
        ps = ParticleSet(np.tile(THETA_DISK_FLOOR, (4, 1)),
                         np.full(4, 0.25))
        ps.particles[2, MU] = 0.77
        sim = StubSim(fail_when=lambda t: t[:, MU] == 0.77)
        obs = [_obs(), _obs(pose=(0.01, 0.1, 0.0))]
        out, info = flt.pf_update(ps, obs, [np.array([0.01, 0.1, 0.0])],
                                  cfg, sim, np.random.default_rng(0))
        assert out.weights[2] == 0.0
        assert info.n_failed == 1

    def test_all_failed_raises_divergence(self):
        ps = ParticleSet(np.tile(THETA_DISK_FLOOR, (4, 1)),
                         np.full(4, 0.25))
        sim = StubSim(fail_when=lambda t: np.ones(len(t), dtype=bool))
        obs = [_obs(), _obs()]
        with pytest.raises(FilterDivergence):
            flt.pf_update(ps, obs, [np.zeros(3)], CFG, sim,
                          np.random.default_rng(0))

    def test_window_validation(self):
        ps = ParticleSet(np.tile(THETA_DISK_FLOOR, (4, 1)),
                         np.full(4, 0.25))
        with pytest.raises(flt.FilterError):
            flt.pf_update(ps, [_obs()], [], CFG, StubSim(),
                          np.random.default_rng(0))

    def test_true_particle_rank_never_drops(self, disk_sim):
        cfg = FilterConfig(particles=32, resample_frac=0.0)
        rng = np.random.default_rng(10)
        ps = flt.init_particles(cfg, rng)
        truth = THETA_DISK_FLOOR.copy()
        ps.particles[7] = truth
        pose = np.array([0.0, 0.052, 0.0])
        cmd = np.array([0.0, 0.046, 0.0])
        nxt, wr, ok, _ = disk_sim.step_batch(truth[None], pose, cmd)
        obs = [_obs(pose=pose), Observation(pose=nxt[0], wrench=wr[0])]
        out, _ = flt.pf_update(ps, obs, [cmd], cfg, disk_sim,
                               np.random.default_rng(0))
        assert out.weights.argmax() == 7


class TestPosteriorSummary:
    def test_point_mass(self):
        ps = ParticleSet(np.tile(THETA_DISK_FLOOR, (10, 1)),
                         np.full(10, 0.1))
        mean, std = flt.posterior_summary(ps, 5)
        np.testing.assert_allclose(mean, THETA_DISK_FLOOR, atol=1e-12)
        np.testing.assert_allclose(std, 0.0, atol=1e-12)

    def test_weighted_mean(self):
        p = np.zeros((2, 9))
        p[1, GH] = 1.0
        ps = ParticleSet(p, np.array([0.75, 0.25]))
        mean, _ = flt.posterior_summary(ps, 2)
        assert mean[GH] == pytest.approx(0.25)

    def test_top_k_equals_all_uniform(self):
        rng = np.random.default_rng(11)
        p = rng.normal(0, 1, (40, 9))
        ps = ParticleSet(p, np.full(40, 1 / 40))
        mean, _ = flt.posterior_summary(ps, 40)
        np.testing.assert_allclose(mean[:4], p[:, :4].mean(axis=0),
                                   atol=1e-12)


class TestPredictDynamics:
    def test_point_mass_matches_single_step(self, disk_sim):
        ps = ParticleSet(np.tile(THETA_DISK_FLOOR, (10, 1)),
                         np.full(10, 0.1))
        pose = np.array([0.0, 0.052, 0.0])
        cmd = np.array([0.0, 0.047, 0.0])
        mean, std = flt.predict_dynamics(ps, pose, cmd, disk_sim, k=10)
        x, w = disk_sim.step(THETA_DISK_FLOOR, pose, cmd)
        np.testing.assert_allclose(mean.pose, x, atol=1e-12)
        np.testing.assert_allclose(mean.wrench, w, atol=1e-12)
        np.testing.assert_allclose(std.pose, 0.0, atol=1e-12)
        np.testing.assert_allclose(std.wrench, 0.0, atol=1e-12)

    def test_free_space_identity(self, disk_sim):
        rng = np.random.default_rng(12)
        cfg = FilterConfig(particles=16)
        ps = flt.init_particles(cfg, rng)
        pose = np.array([0.0, 0.30, 0.0])
        cmd = np.array([0.01, 0.30, 0.0])
        mean, std = flt.predict_dynamics(ps, pose, cmd, disk_sim, k=16)
        np.testing.assert_allclose(mean.pose, cmd, atol=1e-12)
        np.testing.assert_allclose(mean.wrench, 0.0, atol=1e-12)
        np.testing.assert_allclose(std.wrench, 0.0, atol=1e-12)

    def test_two_floor_hypotheses_mix(self, disk_sim):
        a = THETA_DISK_FLOOR.copy()
        b = THETA_DISK_FLOOR.copy()
        a[GH] = 0.0
        b[GH] = 0.01
        ps = ParticleSet(np.stack([a, b]), np.array([0.7, 0.3]))
        pose = np.array([0.0, 0.055, 0.0])
        cmd = np.array([0.0, 0.04, 0.0])
        mean, _ = flt.predict_dynamics(ps, pose, cmd, disk_sim, k=2)
        _, wa = disk_sim.step(a, pose, cmd)
        _, wb = disk_sim.step(b, pose, cmd)
        assert mean.wrench[1] == pytest.approx(0.7 * wa[1] + 0.3 * wb[1],
                                               abs=1e-10)

    def test_all_failed_raises(self):
        ps = ParticleSet(np.tile(THETA_DISK_FLOOR, (4, 1)),
                         np.full(4, 0.25))
        sim = StubSim(fail_when=lambda t: np.ones(len(t), dtype=bool))
        with pytest.raises(flt.PredictionError):
            flt.predict_dynamics(ps, np.zeros(3), np.zeros(3), sim, k=4)


class TestBeliefSnapshot:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(13)
        ps = flt.init_particles(FilterConfig(particles=32), rng)
        path = tmp_path / "belief.npz"
        flt.save_belief(path, ps)
        loaded = flt.load_belief(path)
        np.testing.assert_array_equal(loaded.particles, ps.particles)
        np.testing.assert_array_equal(loaded.weights, ps.weights)

    def test_malformed_rejected(self, tmp_path):
        path = tmp_path / "junk.npz"
        np.savez(path, nonsense=np.zeros(3))
        with pytest.raises(flt.FilterError):
            flt.load_belief(path)


class TestNormalization:
    def test_weights_sum_to_one_after_updates(self, disk_sim):
        cfg = FilterConfig(particles=64)
        rng = np.random.default_rng(14)
        ps = flt.init_particles(cfg, rng)
        truth = THETA_DISK_FLOOR
        pose = np.array([0.0, 0.055, 0.0])
        obs = [_obs(pose=pose)]
        cmds = []
        for k in range(4):
            cmd = np.array([0.002 * k, 0.05 - 0.004 * k, 0.0])
            nxt, wr, ok, _ = disk_sim.step_batch(truth[None], pose, cmd)
            obs.append(Observation(pose=nxt[0], wrench=wr[0]))
            cmds.append(cmd)
            pose = nxt[0]
            ps, _ = flt.pf_update(ps, obs[-cfg.memory_length:],
                                  cmds[-(len(obs[-cfg.memory_length:]) - 1):],
                                  cfg, disk_sim, rng)
            assert ps.weights.sum() == pytest.approx(1.0, abs=1e-9)
            assert np.all(ps.particles >= np.asarray(cfg.prior_low) - 1e-12)
            assert np.all(ps.particles <= np.asarray(cfg.prior_high) + 1e-12)
