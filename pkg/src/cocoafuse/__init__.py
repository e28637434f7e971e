"""CoCoAFusE-style density regression: competitive, collaborative, and
fused combinations of Gaussian linear experts with HMC inference."""

from .dataio import Dataset, FeatureTransform, load_csv, save_csv, split
from .density_core import (
    FusionCoefficient,
    GaussianParams,
    Weights,
    blend_logpdf,
    blend_params,
    count_modes,
    fusion_component_params,
    fusion_logpdf,
    log_sum_exp,
    mixture_logpdf,
)
from .empirical_bayes import EBConfig, EBTrace, tune
from .metrics import MetricsReport, cic, cil, emse, lppd, psis_loo, r_squared
from .model import (
    ModelDims,
    ModelSpec,
    ParameterVector,
    PriorConfig,
    behavior_beta,
    conditional_logpdf,
    gate_probs,
    log_posterior_unconstrained,
    log_prior,
)
from .sampler import (
    PosteriorSample,
    PredictiveDraws,
    SamplerConfig,
    credible_interval,
    posterior_predict,
    sample_posterior,
    split_rhat,
)
from .selection import Trial, improvement_lower_bound, pareto_front, select
from .synth import (
    SwitchConfig,
    TransitionConfig,
    conditional_mean_oracle,
    gen_switch,
    gen_transition,
)

__version__ = "0.1.0"
