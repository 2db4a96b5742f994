"""Differentiable architecture search over multi-split reversible encoder-decoder networks.

Backpropagation rebuilds each layer's input from its output, so activation
memory does not grow with depth; the search itself is a softmax relaxation
over a small candidate set of sequence operations.
"""

from .architecture import Architecture, SchemaError
from .candidate_ops import DECODER_KINDS, ENCODER_KINDS, OPERATION_KINDS, AttentionContext, apply_op, build_op_set
from .data import DatasetSpec, SyntheticDataset, generate_dataset
from .ledger import MemoryLedger
from .model import Dims, Seq2SeqNet
from .reversible import (
    ReconstructionError,
    ReversibleLayer,
    backward_with_reconstruction,
    forward_layer,
    inverse_layer,
    stack_backward,
    stack_forward,
)
from .search import (
    SearchConfig,
    SuperNetwork,
    bilevel_step,
    discretize,
    discretize_alphas,
    mixed_forward,
    run_search,
    sample_uniform_path,
    search_space_size,
)
from .seq2seq import TrainConfig, build_derived, evaluate, greedy_decode, train_derived
from .tensor import RngStream, Tape, Tensor, backward_from, detach, no_grad

__version__ = "0.1.0"
