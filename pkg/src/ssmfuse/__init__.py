"""Multimodal sequence fusion with selective state-space layers.

Building blocks: a tape-based autodiff tensor core, the selective scan and
its gated layer, transport/kernel alignment losses, modality-aware expert
layers, the end-to-end fusion model with its training loop, synthetic data
generation, and a forward-pass scaling benchmark. The ``ssmfuse`` CLI ties
them together.
"""

from . import align, bench, cli, data, model, moe, ssm, tensor
from .align import AlignConfig, alignment_loss, cost_matrix, mmd_loss, ot_loss, sinkhorn_ot
from .data import Dataset, ModalitySpec, MultimodalSample, SynthConfig, generate
from .model import FusionModel, ModelConfig, TrainConfig, train
from .moe import MoEMambaLayer, moe_mamba_forward
from .ssm import MambaLayer, discretize, mamba_forward, scan_parallel, scan_sequential
from .tensor import Tensor, backward, record

__version__ = "0.1.0"
