"""Causal attention operators with learnable bandpass filters."""

from .autodiff import Tensor, backward, grad, gradcheck, no_grad
from .bandpass import (
    BandpassParams, FrequencyResponse, analytic_response, effective_decay, numerical_response, regime_classify, rotate,
)
from .diagnostics import (
    DiagnosticMap, attention_gini, attention_map_approx, gini, gradient_map, rearrange_patches, receptive_field,
    transfer_resolution,
)
from .errors import (
    ConfigurationError, ContractError, DataError, DefocusError, DimensionError, DomainError, FormatError,
    NumericalError, ResourceError,
)
from .network import (
    DefocusBlockConfig, DefocusNetwork, DropPathSchedule, ModelConfig, drop_path_rate, forward, load_checkpoint,
    save_checkpoint, total_loss,
)
from .operators import (
    MambaParams, SequenceBatch, defocus_mamba_scan, defocus_retnet_attention, defocus_retnet_recurrent,
    defocus_vit_attention, materialize_attention_matrix, selective_scan, zoh_discretize,
)
from .training import TrainConfig, adamw_step, evaluate, load_dataset, lr_at, train, write_dataset

__version__ = "0.1.0"
