"""Particle filter over the 9 contact-dynamics parameters.

The belief is a set of weighted parameter hypotheses.  Each update replays
the last N observed transitions through the simulator for every particle,
scores them under a diagonal Gaussian observation model, renormalizes, and
resamples systematically (with post-resample roughening) when the
effective sample size drops below half the particle count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import wrap_angle
from .simulator import TPHI

LOG_FLOOR = -700.0
PHI_CHANNEL = 5      # observation channel order: fx, fz, tau, x, z, phi


class FilterError(Exception):
    pass


class FilterDivergence(FilterError):
    """All particles received zero likelihood."""


@dataclass(frozen=True)
class FilterConfig:
    particles: int = 5000
    memory_length: int = 5
    roughness: float = 0.3
    noise_std: tuple = (30.0, 30.0, 0.3, 1e-4, 1e-4, 2e-3)
    prior_low: tuple = (-1.0, -1.0, -0.02, -0.02, -0.2, 0.8, 0.1, -0.02, 0.09)
    prior_high: tuple = (1.0, 1.0, 0.02, 0.02, 0.2, 1.2, 0.9, 0.02, 0.18)
    resample_frac: float = 0.5
    top_k: int = 100

    def __post_init__(self):
        if self.particles < 2 or self.memory_length < 2:
            raise ValueError("need at least 2 particles and memory length 2")
        if self.roughness < 0 or min(self.noise_std) <= 0:
            raise ValueError("invalid noise configuration")
        if np.any(np.asarray(self.prior_high) <= np.asarray(self.prior_low)):
            raise ValueError("empty prior support interval")


@dataclass
class Observation:
    pose: np.ndarray     # (3,) x, z, phi
    wrench: np.ndarray   # (3,) fx, fz, tau

    def channels(self):
        """Likelihood channel vector (fx, fz, tau, x, z, phi)."""
        return np.concatenate([self.wrench, self.pose])


@dataclass
class ParticleSet:
    particles: np.ndarray   # (M, 9)
    weights: np.ndarray     # (M,) normalized

    def copy(self):
        return ParticleSet(self.particles.copy(), self.weights.copy())


@dataclass
class UpdateInfo:
    n_eff: float
    resampled: bool
    n_failed: int = 0


def init_particles(cfg: FilterConfig, rng) -> ParticleSet:
    """Uniform draws inside the prior box with uniform weights."""
    lo = np.asarray(cfg.prior_low)
    hi = np.asarray(cfg.prior_high)
    particles = rng.uniform(lo, hi, size=(cfg.particles, 9))
    weights = np.full(cfg.particles, 1.0 / cfg.particles)
    return ParticleSet(particles, weights)


def _channel_log_density(residual, noise_std):
    """Sum of per-channel Gaussian log densities; residual (..., 6)."""
    sigma = np.asarray(noise_std)
    wrapped = residual.copy()
    wrapped[..., PHI_CHANNEL] = wrap_angle(wrapped[..., PHI_CHANNEL])
    norm = np.log(sigma * np.sqrt(2.0 * np.pi)).sum()
    return -0.5 * ((wrapped / sigma) ** 2).sum(axis=-1) - norm


def log_likelihood(o_pred: Observation, o_actual: Observation, noise_std):
    """Log density of the actual observation under the prediction."""
    return float(_channel_log_density(
        o_pred.channels() - o_actual.channels(), noise_std))


def effective_sample_size(weights):
    """1 / sum(w^2); ranges from 1 (degenerate) to M (uniform)."""
    w = np.asarray(weights)
    return 1.0 / float((w ** 2).sum())


def resample_systematic(ps: ParticleSet, rng, size=None) -> ParticleSet:
    """Low-variance systematic resampling with one uniform draw.

    Copy counts are integer-bracketed: floor(size * w) <= count <=
    ceil(size * w).  ``size`` defaults to the current particle count.
    """
    m = len(ps.weights)
    size = m if size is None else int(size)
    u0 = rng.uniform(0.0, 1.0) / size
    points = u0 + np.arange(size) / size
    cumulative = np.cumsum(ps.weights)
    cumulative[-1] = 1.0
    idx = np.minimum(np.searchsorted(cumulative, points, side="right"),
                     m - 1)
    return ParticleSet(ps.particles[idx].copy(), np.full(size, 1.0 / size))


def roughen(particles, roughness, variances, prior_low, prior_high, rng):
    """Add zero-mean jitter with variance roughness * variances, then clamp.

    ``variances`` is the per-dimension spread of the particle cloud just
    before resampling (unweighted).  Using the weighted variance instead
    would shrink to zero exactly when one particle dominates, freezing the
    filter at the moment roughening is supposed to rescue it.
    """
    if roughness == 0.0:
        return particles.copy()
    std = np.sqrt(roughness * np.maximum(np.asarray(variances), 0.0))
    noise = rng.normal(0.0, 1.0, size=particles.shape) * std
    return np.clip(particles + noise, prior_low, prior_high)


def _weighted_moments(particles, weights):
    mean = weights @ particles
    var = weights @ (particles - mean) ** 2
    return mean, var


def predict_observations(ps_particles, pose, command, sim):
    """Per-particle predicted observation channels for one transition.

    Returns (channels (M, 6), ok (M,)).
    """
    poses_next, wrenches, ok, _ = sim.step_batch(ps_particles, pose, command)
    return np.concatenate([wrenches, poses_next], axis=1), ok


def pf_update(ps: ParticleSet, observations, commands, cfg: FilterConfig,
              sim, rng):
    """One filtering step over the memory window.

    observations: list of the last N Observation (>= 2 during warm-up);
    commands: the N-1 commands between them.  Returns the new ParticleSet
    and an UpdateInfo with the pre-resample effective sample size.
    """
    n_obs = len(observations)
    if n_obs < 2 or len(commands) != n_obs - 1:
        raise FilterError("window needs >= 2 observations and N-1 commands")
    m = len(ps.weights)
    n_pairs = n_obs - 1

    thetas = np.tile(ps.particles, (n_pairs, 1))
    poses = np.repeat(
        np.stack([observations[j].pose for j in range(n_pairs)]), m, axis=0)
    cmds = np.repeat(
        np.stack([commands[j] for j in range(n_pairs)]), m, axis=0)
    actual = np.stack(
        [observations[j + 1].channels() for j in range(n_pairs)])

    pred, ok = predict_observations(thetas, poses, cmds, sim)
    residual = pred.reshape(n_pairs, m, 6) - actual[:, None, :]
    loglik = _channel_log_density(residual, cfg.noise_std)
    loglik = np.where(ok.reshape(n_pairs, m), loglik, -np.inf)
    total = loglik.sum(axis=0)
    n_failed = int((~ok.reshape(n_pairs, m).all(axis=0)).sum())

    with np.errstate(divide="ignore"):
        log_w = np.log(ps.weights) + total
    peak = log_w.max()
    if not np.isfinite(peak):
        raise FilterDivergence("all particles have zero likelihood")
    shifted = log_w - peak
    # floor protects finite underflow; -inf (failed / zero-weight) stays zero
    weights = np.exp(np.maximum(shifted, LOG_FLOOR))
    weights[np.isneginf(shifted)] = 0.0
    weights /= weights.sum()

    n_eff = effective_sample_size(weights)
    updated = ParticleSet(ps.particles.copy(), weights)
    resampled = False
    if n_eff <= cfg.resample_frac * m:
        variances = updated.particles.var(axis=0)
        updated = resample_systematic(updated, rng)
        updated.particles = roughen(
            updated.particles, cfg.roughness, variances,
            cfg.prior_low, cfg.prior_high, rng)
        resampled = True
    return updated, UpdateInfo(n_eff=n_eff, resampled=resampled,
                               n_failed=n_failed)


def _top_k(ps: ParticleSet, k):
    k = min(k, len(ps.weights))
    order = np.argsort(-ps.weights, kind="stable")[:k]
    w = ps.weights[order]
    total = w.sum()
    if total <= 0:
        w = np.full(k, 1.0 / k)
    else:
        w = w / total
    return order, w


def posterior_summary(ps: ParticleSet, k=100):
    """Weighted mean/std over the k largest-weight particles.

    The attachment angle dimension uses the circular mean and the standard
    deviation of wrapped deviations.
    """
    order, w = _top_k(ps, k)
    p = ps.particles[order]
    mean = w @ p
    ang = p[:, TPHI]
    mean_ang = np.arctan2(w @ np.sin(ang), w @ np.cos(ang))
    mean[TPHI] = mean_ang
    dev = p - mean
    dev[:, TPHI] = wrap_angle(dev[:, TPHI])
    std = np.sqrt(w @ dev ** 2)
    return mean, std


class PredictionError(FilterError):
    """Raised when every selected particle fails to simulate."""


def predict_dynamics(ps: ParticleSet, pose, command, sim, k=100):
    """Belief-weighted predicted observation for one candidate transition.

    Simulates the top-k particles and returns (mean Observation,
    std Observation); failed particles are dropped with renormalization.
    """
    order, w = _top_k(ps, k)
    channels, ok = predict_observations(ps.particles[order], pose, command,
                                        sim)
    if not ok.any():
        raise PredictionError("no particle produced a valid prediction")
    w = np.where(ok, w, 0.0)
    w = w / w.sum()
    mean = w @ channels
    ang = channels[:, PHI_CHANNEL]
    mean[PHI_CHANNEL] = np.arctan2(w @ np.sin(ang), w @ np.cos(ang))
    dev = channels - mean
    dev[:, PHI_CHANNEL] = wrap_angle(dev[:, PHI_CHANNEL])
    std = np.sqrt(w @ dev ** 2)
    mean_obs = Observation(pose=mean[3:6], wrench=mean[0:3])
    std_obs = Observation(pose=std[3:6], wrench=std[0:3])
    return mean_obs, std_obs


BELIEF_FORMAT_VERSION = 1


def save_belief(path, ps: ParticleSet):
    """Versioned binary belief snapshot (numpy archive)."""
    np.savez(path, format_version=np.int64(BELIEF_FORMAT_VERSION),
             particles=ps.particles, weights=ps.weights)


def load_belief(path) -> ParticleSet:
    with np.load(path) as data:
        if "format_version" not in data:
            raise FilterError("not a belief snapshot")
        version = int(data["format_version"])
        if version != BELIEF_FORMAT_VERSION:
            raise FilterError(f"unsupported belief format {version}")
        particles = data["particles"]
        weights = data["weights"]
    if particles.ndim != 2 or particles.shape[1] != 9 \
            or weights.shape != (particles.shape[0],):
        raise FilterError("malformed belief snapshot")
    return ParticleSet(particles, weights)
