"""Scenario definition, YAML schema, and trajectory builders.

A scenario bundles everything one experiment needs: the object shape, the
ground-truth parameter vector (or the seed to sample it from the priors),
simulator and filter configuration, and the exploration / evaluation
trajectories.  Scenario files are strict YAML: every key carries its unit
in its name and unknown keys are rejected.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from .filtering import FilterConfig
from .geometry import (DiskSdf, PolylineSdf, RectangleSdf, SdfNet,
                       superellipse_sdf)
from .simulator import GH, MU, PW, SCALE, SimConfig, TPHI, TX, TZ, Z1, Z2

SCENARIO_FORMAT = "contactest-scenario-v1"


class ScenarioError(Exception):
    pass


def build_model(shape: dict):
    """Instantiate the object SDF model described by a shape mapping."""
    kind = shape.get("kind")
    if kind == "disk":
        return DiskSdf(shape["radius_m"])
    if kind == "rectangle":
        return RectangleSdf(shape["half_x_m"], shape["half_z_m"])
    if kind == "superellipse":
        return superellipse_sdf(shape["a_m"], shape["b_m"],
                                shape["exponent"])
    if kind == "outline":
        pts = np.loadtxt(shape["path"], delimiter=",")
        return PolylineSdf(pts)
    if kind == "sdf2":
        return SdfNet.load(shape["path"])
    raise ScenarioError(f"unknown shape kind {kind!r}")


_SHAPE_KEYS = {
    "disk": {"kind", "radius_m"},
    "rectangle": {"kind", "half_x_m", "half_z_m"},
    "superellipse": {"kind", "a_m", "b_m", "exponent"},
    "outline": {"kind", "path"},
    "sdf2": {"kind", "path", "latent_index"},
}


@dataclass
class Scenario:
    name: str
    seed: int
    shape: dict
    sim: SimConfig
    filt: FilterConfig
    initial_pose: np.ndarray                  # (3,)
    theta_true: np.ndarray | None = None      # (9,); None -> sample priors
    explore_steps: int = 15
    base_trajectory: np.ndarray | None = None      # (S, 3) ee targets
    expert_trajectory: np.ndarray | None = None    # (S, 3), optional
    random_std: tuple = (0.03, 0.03, 0.25)
    action_grid: tuple = (0.03, 0.03, 0.025)
    eval_steps: int = 30
    eval_trajectories: list = field(default_factory=list)
    sensor_noise_std: tuple | None = None     # 6 channels, None = noiseless

    def sample_theta(self, rng):
        lo = np.asarray(self.filt.prior_low)
        hi = np.asarray(self.filt.prior_high)
        theta = rng.uniform(lo, hi)
        if self.shape.get("kind") == "sdf2" and "latent_index" in self.shape:
            model = build_model(self.shape)
            theta[[Z1, Z2]] = model.reference_latents[
                self.shape["latent_index"]]
        return theta

    def resolved_theta(self, rng):
        if self.theta_true is not None:
            return np.asarray(self.theta_true, dtype=float)
        return self.sample_theta(rng)


def descend_then_slide(initial_pose, n_down=7, n_right=8, dz=0.01, dx=0.01,
                       floor_target=None):
    """Base exploration trajectory: press toward the floor, then move +x."""
    x0, z0, phi0 = np.asarray(initial_pose, dtype=float)
    waypoints = []
    z = z0
    for _ in range(n_down):
        z = z - dz if floor_target is None else max(z - dz, floor_target)
        waypoints.append([x0, z, phi0])
    x = x0
    for _ in range(n_right):
        x += dx
        waypoints.append([x, z, phi0])
    return np.asarray(waypoints)


def expert_trajectory(theta_true, initial_pose, steps=15):
    """Scripted exploration using the ground-truth wall position.

    Floor presses with rotations probe the bottom profile, then the object
    is lifted clear of the floor and pushed straight into the wall at two
    heights (wall-only touches avoid the friction stall of sliding
    approaches), and the run finishes with floor presses at a second
    location.
    """
    theta = np.asarray(theta_true, dtype=float)
    p_w = theta[PW]
    g_h = theta[GH]
    x0, z0, phi0 = np.asarray(initial_pose, dtype=float)
    z_press = g_h + 0.012
    z_lift = g_h + 0.105
    pts = [
        [x0, z0 - 0.05, phi0],
        [x0, z_press, phi0],
        [x0, z_press - 0.012, phi0],
        [x0, z_press - 0.012, 0.1],
        [x0, z_press - 0.012, -0.1],
        [p_w - 0.10, z_lift, 0.0],
        [p_w - 0.02, z_lift, 0.0],
        [p_w + 0.005, z_lift, 0.0],
        [p_w + 0.01, z_lift, 0.087],
        [p_w - 0.005, z_lift + 0.03, -0.087],
        [p_w + 0.01, z_lift + 0.03, 0.0],
        [x0 + 0.03, z_press + 0.02, 0.0],
        [x0 + 0.03, z_press - 0.008, 0.0],
        [x0 + 0.03, z_press - 0.012, 0.1],
        [x0 + 0.03, z_press - 0.016, -0.1],
    ]
    pts = np.asarray(pts)
    if len(pts) < steps:
        pts = np.vstack([pts, np.tile(pts[-1], (steps - len(pts), 1))])
    return pts[:steps]


def default_eval_trajectories(initial_pose, steps=30):
    """Three held-out command trajectories with deep presses (>= 20 N)."""
    x0, z0, phi0 = np.asarray(initial_pose, dtype=float)
    t1 = []
    z = z0
    for k in range(steps):
        z -= 0.011
        t1.append([x0, max(z, -0.18), phi0])
    t2 = []
    x, z = x0, z0
    for k in range(steps):
        z = max(z - 0.012, -0.10)
        if k >= 12:
            x += 0.008
        t2.append([x, z, 0.03 * np.sin(0.4 * k)])
    t3 = []
    x, z = x0, z0
    for k in range(steps):
        if k < 8:
            z -= 0.008
        else:
            x += 0.012
        t3.append([min(x, 0.25), z, phi0])
    return [np.asarray(t) for t in (t1, t2, t3)]


def make_scenario(name="default", seed=0, shape=None, particles=5000,
                  initial_pose=(0.0, 0.11, 0.0), explore_steps=15,
                  eval_steps=30, sim=None, filt=None,
                  theta_true=None) -> Scenario:
    shape = shape or {"kind": "disk", "radius_m": 0.05}
    sim = sim or SimConfig()
    filt = filt or FilterConfig(particles=particles)
    initial_pose = np.asarray(initial_pose, dtype=float)
    scenario = Scenario(
        name=name, seed=seed, shape=shape, sim=sim, filt=filt,
        initial_pose=initial_pose,
        theta_true=None if theta_true is None else np.asarray(theta_true),
        explore_steps=explore_steps,
        base_trajectory=descend_then_slide(initial_pose),
        eval_steps=eval_steps,
        eval_trajectories=default_eval_trajectories(initial_pose,
                                                    eval_steps))
    return scenario


# ---------------- YAML I/O ----------------

def _require_keys(mapping, allowed, context):
    unknown = set(mapping) - allowed
    if unknown:
        raise ScenarioError(
            f"unknown keys {sorted(unknown)} in {context}")


def _pose_from(mapping, context):
    _require_keys(mapping, {"x_m", "z_m", "phi_rad"}, context)
    return np.array([mapping["x_m"], mapping["z_m"], mapping["phi_rad"]])


_THETA_KEYS = {"z": (Z1, Z2), "attach_x_m": TX, "attach_z_m": TZ,
               "attach_phi_rad": TPHI, "scale": SCALE, "friction": MU,
               "floor_height_m": GH, "wall_position_m": PW}


def _theta_from(mapping):
    _require_keys(mapping, set(_THETA_KEYS), "theta_true")
    theta = np.zeros(9)
    for key, idx in _THETA_KEYS.items():
        if key == "z":
            theta[[Z1, Z2]] = mapping["z"]
        else:
            theta[idx] = mapping[key]
    return theta


def _theta_to(theta):
    return {
        "z": [float(theta[Z1]), float(theta[Z2])],
        "attach_x_m": float(theta[TX]), "attach_z_m": float(theta[TZ]),
        "attach_phi_rad": float(theta[TPHI]), "scale": float(theta[SCALE]),
        "friction": float(theta[MU]), "floor_height_m": float(theta[GH]),
        "wall_position_m": float(theta[PW]),
    }


def load_scenario(path) -> Scenario:
    with open(path) as f:
        doc = yaml.safe_load(f)
    if not isinstance(doc, dict) or doc.get("format") != SCENARIO_FORMAT:
        raise ScenarioError(f"expected format {SCENARIO_FORMAT!r}")
    allowed = {"format", "name", "seed", "shape", "theta_true", "sim",
               "filter", "initial_pose", "exploration", "evaluation",
               "sensor_noise"}
    _require_keys(doc, allowed, "scenario")

    shape = doc["shape"]
    kind = shape.get("kind")
    if kind not in _SHAPE_KEYS:
        raise ScenarioError(f"unknown shape kind {kind!r}")
    _require_keys(shape, _SHAPE_KEYS[kind], "shape")

    sim_doc = doc.get("sim", {})
    _require_keys(sim_doc, {"stiffness_n_per_m_x", "stiffness_n_per_m_z",
                            "stiffness_nm_per_rad", "step_duration_s",
                            "substeps", "contact_threshold_m",
                            "gravity_compensated", "surface_points"}, "sim")
    sim = SimConfig(
        stiffness=(sim_doc.get("stiffness_n_per_m_x", 100.0),
                   sim_doc.get("stiffness_n_per_m_z", 100.0),
                   sim_doc.get("stiffness_nm_per_rad", 50.0)),
        h=sim_doc.get("step_duration_s", 0.1),
        n_sub=sim_doc.get("substeps", 5),
        contact_threshold=sim_doc.get("contact_threshold_m", 0.002),
        gravity_comp=sim_doc.get("gravity_compensated", True),
        n_surface_points=sim_doc.get("surface_points", 64))

    f_doc = doc.get("filter", {})
    _require_keys(f_doc, {"particles", "memory_length", "roughness",
                          "noise_std", "resample_fraction", "top_k",
                          "priors"}, "filter")
    noise = f_doc.get("noise_std", {})
    _require_keys(noise, {"fx_n", "fz_n", "tau_nm", "x_m", "z_m",
                          "phi_rad"}, "filter.noise_std")
    kwargs = {}
    if noise:
        kwargs["noise_std"] = (noise["fx_n"], noise["fz_n"],
                               noise["tau_nm"], noise["x_m"], noise["z_m"],
                               noise["phi_rad"])
    priors = f_doc.get("priors", {})
    if priors:
        _require_keys(priors, set(_THETA_KEYS), "filter.priors")
        lo = np.zeros(9)
        hi = np.zeros(9)
        for key, idx in _THETA_KEYS.items():
            if key == "z":
                lo[[Z1, Z2]] = [priors["z"][0][0], priors["z"][0][1]]
                hi[[Z1, Z2]] = [priors["z"][1][0], priors["z"][1][1]]
            else:
                lo[idx], hi[idx] = priors[key]
        kwargs["prior_low"] = tuple(lo)
        kwargs["prior_high"] = tuple(hi)
    filt = FilterConfig(
        particles=f_doc.get("particles", 5000),
        memory_length=f_doc.get("memory_length", 5),
        roughness=f_doc.get("roughness", 0.3),
        resample_frac=f_doc.get("resample_fraction", 0.5),
        top_k=f_doc.get("top_k", 100), **kwargs)

    initial_pose = _pose_from(doc["initial_pose"], "initial_pose")

    exp_doc = doc.get("exploration", {})
    _require_keys(exp_doc, {"steps", "base_trajectory", "expert_trajectory",
                            "random_std", "action_grid_m_m_rad"},
                  "exploration")
    eval_doc = doc.get("evaluation", {})
    _require_keys(eval_doc, {"steps", "trajectories"}, "evaluation")

    scenario = make_scenario(
        name=doc.get("name", os.path.basename(path)),
        seed=int(doc.get("seed", 0)), shape=shape,
        initial_pose=initial_pose, sim=sim, filt=filt,
        explore_steps=exp_doc.get("steps", 15),
        eval_steps=eval_doc.get("steps", 30),
        theta_true=(_theta_from(doc["theta_true"])
                    if "theta_true" in doc else None))
    if "base_trajectory" in exp_doc:
        scenario.base_trajectory = np.asarray(exp_doc["base_trajectory"],
                                              dtype=float)
    if "expert_trajectory" in exp_doc:
        scenario.expert_trajectory = np.asarray(exp_doc["expert_trajectory"],
                                                dtype=float)
    if "random_std" in exp_doc:
        scenario.random_std = tuple(exp_doc["random_std"])
    if "action_grid_m_m_rad" in exp_doc:
        scenario.action_grid = tuple(exp_doc["action_grid_m_m_rad"])
    if "trajectories" in eval_doc:
        scenario.eval_trajectories = [np.asarray(t, dtype=float)
                                      for t in eval_doc["trajectories"]]
    if "sensor_noise" in doc:
        sn = doc["sensor_noise"]
        _require_keys(sn, {"fx_n", "fz_n", "tau_nm", "x_m", "z_m",
                           "phi_rad"}, "sensor_noise")
        scenario.sensor_noise_std = (sn["fx_n"], sn["fz_n"], sn["tau_nm"],
                                     sn["x_m"], sn["z_m"], sn["phi_rad"])
    return scenario


def save_scenario(path, scenario: Scenario):
    doc = {
        "format": SCENARIO_FORMAT,
        "name": scenario.name,
        "seed": int(scenario.seed),
        "shape": scenario.shape,
        "initial_pose": {"x_m": float(scenario.initial_pose[0]),
                         "z_m": float(scenario.initial_pose[1]),
                         "phi_rad": float(scenario.initial_pose[2])},
        "sim": {
            "stiffness_n_per_m_x": scenario.sim.stiffness[0],
            "stiffness_n_per_m_z": scenario.sim.stiffness[1],
            "stiffness_nm_per_rad": scenario.sim.stiffness[2],
            "step_duration_s": scenario.sim.h,
            "substeps": scenario.sim.n_sub,
            "contact_threshold_m": scenario.sim.contact_threshold,
            "gravity_compensated": scenario.sim.gravity_comp,
            "surface_points": scenario.sim.n_surface_points,
        },
        "filter": {
            "particles": scenario.filt.particles,
            "memory_length": scenario.filt.memory_length,
            "roughness": scenario.filt.roughness,
            "resample_fraction": scenario.filt.resample_frac,
            "top_k": scenario.filt.top_k,
            "noise_std": dict(zip(
                ("fx_n", "fz_n", "tau_nm", "x_m", "z_m", "phi_rad"),
                [float(v) for v in scenario.filt.noise_std])),
        },
        "exploration": {
            "steps": scenario.explore_steps,
            "base_trajectory": np.asarray(scenario.base_trajectory).tolist(),
            "random_std": list(scenario.random_std),
            "action_grid_m_m_rad": list(scenario.action_grid),
        },
        "evaluation": {
            "steps": scenario.eval_steps,
            "trajectories": [np.asarray(t).tolist()
                             for t in scenario.eval_trajectories],
        },
    }
    if scenario.theta_true is not None:
        doc["theta_true"] = _theta_to(scenario.theta_true)
    if scenario.expert_trajectory is not None:
        doc["exploration"]["expert_trajectory"] = \
            np.asarray(scenario.expert_trajectory).tolist()
    with open(path, "w") as f:
        yaml.safe_dump(doc, f, sort_keys=False)
