"""Adaptive SMC samplers for semi-linear Bayesian inverse problems, with a
multi-dipole MEG source localization application."""

from .forward import (
    LeadFieldProvider,
    SensorArray,
    SourceGrid,
    assemble_lead_field,
    build_default_geometry,
    geometry_from_json,
    geometry_to_json,
    unit_dipole_field,
)
from .model import (
    ConditioningError,
    DipoleConfig,
    MarginalLikelihoodEvaluator,
    MomentPosterior,
    SemiLinearModel,
    TimeSeriesData,
    conditional_moment_posterior,
    log_marginal_likelihood,
    log_marginal_likelihood_single,
    log_prior,
    tempered_diagnostic,
)
from .kernels import KernelSettings, birth_death_step, location_sweep
from .smc import (
    Particle,
    ParticleSystem,
    RunTrace,
    SmcSettings,
    initialize,
    maybe_resample,
    propose_next_alpha,
    reweight,
    run,
)
from .estimation import (
    Discrepancy,
    PosteriorSummary,
    conditional_intensity,
    delta_c,
    delta_d,
    estimate_moments,
    extract_peak_locations,
    number_posterior,
    summarize,
    unconditional_intensity,
)
from .simulate import GroundTruth, ScenarioSpec, generate, window
from .fullsmc import FullParticle, FullParticleSystem, intensity_std_experiment, run_full

__version__ = "0.1.0"
