"""One-step active exploration by expected information gain.

Candidate commands are scored by the expected KL divergence between the
belief after a hypothetical observation and the current belief, averaged
over which particle generated the observation.  The belief is downsampled
to a fifth of the particles (uniformly, without replacement) before the
quadratic-cost scoring pass; all candidates share the same subset so gain
differences reflect the actions rather than subset noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .filtering import PHI_CHANNEL, ParticleSet, predict_observations
from .geometry import wrap_angle

DOWNSAMPLE_DIVISOR = 5


class ExplorationError(Exception):
    pass


def default_action_deltas(dx=0.03, dz=0.03, dphi=0.025):
    """3x3x3 grid of command deltas over {-dx,0,dx} x {-dz,0,dz} x
    {-dphi,0,dphi}, in row-major order."""
    return np.array(list(product((-dx, 0.0, dx), (-dz, 0.0, dz),
                                 (-dphi, 0.0, dphi))))


@dataclass
class EigReport:
    gains: np.ndarray       # (A,) nats
    chosen: int
    n_retained: int


def kl_weights(w_new, w_old):
    """KL divergence between two weight vectors over the same particles.

    Zero new weight contributes zero; zero old weight with positive new
    weight violates absolute continuity and is a contract error.
    """
    w_new = np.asarray(w_new, dtype=float)
    w_old = np.asarray(w_old, dtype=float)
    if w_new.shape != w_old.shape:
        raise ExplorationError("weight vectors differ in length")
    support = w_new > 0.0
    if np.any(support & (w_old == 0.0)):
        raise ExplorationError("new weight outside old support")
    ratio = np.log(w_new[support] / w_old[support])
    return float((w_new[support] * ratio).sum())


def _pairwise_log_likelihood(channels, noise_std):
    """(K, K) matrix of log N(channels_j; channels_i, R) up to a constant.

    Row i treats particle i's prediction as the observation.
    """
    k = channels.shape[0]
    sigma = np.asarray(noise_std)
    ll = np.zeros((k, k))
    for c in range(channels.shape[1]):
        d = channels[None, :, c] - channels[:, None, c]
        if c == PHI_CHANNEL:
            d = wrap_angle(d)
        ll -= 0.5 * (d / sigma[c]) ** 2
    return ll


def _gain_from_predictions(weights, channels, ok, noise_std):
    """Weighted KL gain over retained particles given their predictions."""
    keep = ok & (weights >= 0.0)
    w = np.where(keep, weights, 0.0)
    total = w.sum()
    if total <= 0.0:
        return 0.0
    w = w / total
    ch = channels[keep]
    wk = w[keep]
    if len(wk) < 2:
        return 0.0
    ll = _pairwise_log_likelihood(ch, noise_std)
    with np.errstate(divide="ignore"):
        log_w = np.log(wk)
    log_post = log_w[None, :] + ll
    log_post -= log_post.max(axis=1, keepdims=True)
    post = np.exp(log_post)
    post /= post.sum(axis=1, keepdims=True)
    support = post > 0.0
    log_ratio = np.where(support, np.log(np.where(support, post, 1.0))
                         - log_w[None, :], 0.0)
    kl_rows = (post * log_ratio).sum(axis=1)
    return float((wk * kl_rows).sum())


def _downsample(ps: ParticleSet, rng):
    m = len(ps.weights)
    # ceil(M / 5), but at least two: a singleton belief has zero KL by
    # construction and would make every candidate look uninformative
    k = min(m, max(-(-m // DOWNSAMPLE_DIVISOR), 2))
    idx = rng.choice(m, size=k, replace=False)
    idx.sort()
    w = ps.weights[idx]
    total = w.sum()
    w = np.full(k, 1.0 / k) if total <= 0.0 else w / total
    return ps.particles[idx], w


def expected_info_gain(command, ps: ParticleSet, pose, cfg, sim, rng):
    """Expected KL information gain of a single candidate command (nats)."""
    particles, weights = _downsample(ps, rng)
    channels, ok = predict_observations(particles, pose, command, sim)
    return _gain_from_predictions(weights, channels, ok, cfg.noise_std)


def select_action(base_command, deltas, ps: ParticleSet, pose, cfg, sim,
                  rng):
    """Score every candidate (base + delta) and return the argmax command.

    All candidates are evaluated on one shared downsampled subset; ties
    break toward the lowest candidate index.
    """
    deltas = np.atleast_2d(np.asarray(deltas, dtype=float))
    if len(deltas) == 0:
        raise ExplorationError("empty action set")
    base = np.asarray(base_command, dtype=float)
    particles, weights = _downsample(ps, rng)
    n_ret = len(weights)
    candidates = base[None, :] + deltas
    candidates[:, 2] = wrap_angle(candidates[:, 2])

    a = len(candidates)
    thetas = np.tile(particles, (a, 1))
    cmds = np.repeat(candidates, n_ret, axis=0)
    channels, ok = predict_observations(thetas, pose, cmds, sim)
    channels = channels.reshape(a, n_ret, 6)
    ok = ok.reshape(a, n_ret)
    gains = np.array([
        _gain_from_predictions(weights, channels[i], ok[i], cfg.noise_std)
        for i in range(a)])
    chosen = int(np.argmax(gains))
    return candidates[chosen], EigReport(gains=gains, chosen=chosen,
                                         n_retained=n_ret)
