"""Synthetic data-generating processes with counterfactual oracles."""
from .dataset import (
    CapoQuery,
    Dataset,
    Trajectory,
    config_hash,
    dataset_to_csv,
    load_dataset,
    load_queries,
    save_dataset,
    save_queries,
)
from .scm import DiscreteScm, confounded_scm, gformula, naive_conditional, null_effect_scm, simulate_scm_dataset
from .semisynth import SemiSynthParams, semisynth_counterfactual, simulate_semisynth_dataset
from .tumor import TumorParams, simulate_counterfactual_oracle, simulate_tumor_dataset

__all__ = [
    "CapoQuery",
    "Dataset",
    "DiscreteScm",
    "SemiSynthParams",
    "Trajectory",
    "TumorParams",
    "config_hash",
    "confounded_scm",
    "dataset_to_csv",
    "gformula",
    "load_dataset",
    "load_queries",
    "naive_conditional",
    "null_effect_scm",
    "save_dataset",
    "save_queries",
    "semisynth_counterfactual",
    "simulate_counterfactual_oracle",
    "simulate_scm_dataset",
    "simulate_semisynth_dataset",
    "simulate_tumor_dataset",
]
