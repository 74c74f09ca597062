"""Likelihood-free Bayesian inference by ABC importance sampling, with
an early-stopping variant and its tuning pipeline."""

from .distributions import (
    DensityPair,
    GammaPrior,
    GaussianMixtureProposal,
    UniformBox,
)
from .sampler import (
    SampleSet,
    WeightedSample,
    combine,
    ess,
    evidence_estimate,
    load_sample_set,
    posterior_estimate,
    posterior_mean_sd,
    posthoc_epsilon,
    run_abc_is,
    run_lazy_abc,
    run_rw_is,
    save_sample_set,
)
from .staged import Stage, StagedModel
from .tuning import (
    AlphaPolicy,
    PilotRecord,
    TuningReport,
    efficiency_estimate,
    estimate_t2,
    gamma_conservative,
    gamma_standard,
    optimal_g,
    optimize_lambda,
    run_pilot,
    select_configuration,
    tune_discrete_multistop,
    tune_one_continuous_multistop,
)

__all__ = [
    "AlphaPolicy",
    "DensityPair",
    "GammaPrior",
    "GaussianMixtureProposal",
    "PilotRecord",
    "SampleSet",
    "Stage",
    "StagedModel",
    "TuningReport",
    "UniformBox",
    "WeightedSample",
    "combine",
    "efficiency_estimate",
    "ess",
    "estimate_t2",
    "evidence_estimate",
    "gamma_conservative",
    "gamma_standard",
    "load_sample_set",
    "optimal_g",
    "optimize_lambda",
    "posterior_estimate",
    "posterior_mean_sd",
    "posthoc_epsilon",
    "run_abc_is",
    "run_lazy_abc",
    "run_pilot",
    "run_rw_is",
    "save_sample_set",
    "select_configuration",
    "tune_discrete_multistop",
    "tune_one_continuous_multistop",
]

__version__ = "0.1.0"
