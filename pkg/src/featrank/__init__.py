"""Feature ranking for small feedforward classifiers.

Three rankers (drop-in weight pruning, input-gradient sensitivity and
permutation importance) plus a remove-and-retrain harness that scores a
ranking by retraining on its top and bottom feature slices.
"""
from featrank.data import Dataset, SplitDataset, load_delimited, load_idx, normalize, split
from featrank.dropin import DropInLayer, PenaltyConfig
from featrank.harness import (
    ExperimentConfig,
    ablation_constraints,
    ablation_step_counter,
    build_network_spec,
    export_mask,
    feature_similarity,
    run_experiment,
)
from featrank.nn import Network, NetworkSpec, TrainConfig, TrainResult, accuracy, forward, input_gradient, train
from featrank.selectors import (
    FeatureRanking,
    SwpaConfig,
    pfi_rank,
    random_rank,
    sbs_rank,
    swpa_rank,
    top_bottom,
)

__version__ = "0.1.0"
