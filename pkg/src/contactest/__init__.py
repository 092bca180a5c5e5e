"""Planar contact-dynamics estimation from pose and wrench measurements."""

from .exploration import (EigReport, default_action_deltas,
                          expected_info_gain, kl_weights, select_action)
from .filtering import (FilterConfig, FilterDivergence, Observation,
                        ParticleSet, effective_sample_size, init_particles,
                        load_belief, log_likelihood, pf_update,
                        posterior_summary, predict_dynamics,
                        resample_systematic, roughen, save_belief)
from .geometry import (DiskSdf, LatentShape, PolylineSdf, RectangleSdf,
                       SdfNet, env_sdf, sdf_gradient, sdf_query,
                       superellipse_sdf, surface_points)
from .runner import (MetricsRow, RunLog, aggregate_metrics, run_eval,
                     run_exploration)
from .scenarios import Scenario, build_model, load_scenario, make_scenario
from .simulator import (ContactPoint, QpSolution, SimConfig, Simulator,
                        StepError, Wrench)

__version__ = "0.1.0"
