"""Parameter-efficient tuning of a HuBERT-shaped backbone with CNN and Houlsby adapters."""
from .accounting import (ParamReport, PetModel, PetStrategy, apply_strategy, count_params,
                         diff_reports, strategy_report, trainable_ratio)
from .backbone import BackboneConfig, ConvBlockSpec, build_backbone, get_preset, output_length
from .harness import TrainConfig, attach_head, low_resource_sweep, lr_grid_search, train
from .synth import SyntheticTaskSpec, gen_synthetic_dataset

__version__ = "0.1.0"
