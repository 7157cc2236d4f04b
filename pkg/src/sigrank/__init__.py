"""Signal ranking models and counterfactual offline evaluation for randomized logs."""
from .cfmetric import (
    CounterfactualReport,
    bootstrap_stderr,
    compare_policies,
    estimate_adjusted,
    estimate_simple,
)
from .cle import CLERanker, cle_assign, fit_cle, two_proportion_z
from .core import (
    ConversionLabels,
    Dataset,
    Impression,
    LoggedPolicy,
    RankingPolicy,
    UniformRandomPolicy,
    partition_by_qualification,
    split_train_eval,
    validate_dataset,
)
from .io import load_model, read_dataset, save_model, write_dataset
from .retro import RetrospectiveRanker, build_training_set, fit_retro, retro_assign
from .synth import GroundTruth, SynthConfig, generate, oracle_policy, true_value

__version__ = "0.1.0"
