"""Quantization-aware architecture search, skip removal and pruning for CNN+CTC basecallers."""

from .checkpoint import CheckpointError, ChecksumError, load_checkpoint, save_checkpoint
from .config import PipelineConfig, load_config, toy_model_config
from .ctc import ctc_loss, greedy_decode
from .eval_report import align_identity, identity_summary, model_report, throughput
from .net import BlockConfig, Model, ModelConfig, build, count_params, remove_skip
from .pruning import PruneMask, fine_tune, prune_structured_channels, prune_unstructured, sparsity
from .qabas import SearchConfig, SearchSpace, build_supernet, derive_architecture, search
from .quant import FLOAT, QuantSpec, bops, mac_throughput, model_size_bytes
from .signal_sim import SimConfig, chunk_dataset, simulate_reads
from .skipclip import KdConfig, kd_loss, skipclip_train
from .train import OptimConfig, basecall_read, fit

__version__ = "0.1.0"

__all__ = [
    "BlockConfig", "CheckpointError", "ChecksumError", "FLOAT", "KdConfig", "Model", "ModelConfig",
    "OptimConfig", "PipelineConfig", "PruneMask", "QuantSpec", "SearchConfig", "SearchSpace", "SimConfig",
    "align_identity", "basecall_read", "bops", "build", "build_supernet", "chunk_dataset", "count_params",
    "ctc_loss", "derive_architecture", "fine_tune", "fit", "greedy_decode", "identity_summary", "kd_loss",
    "load_checkpoint", "load_config", "mac_throughput", "model_report", "model_size_bytes",
    "prune_structured_channels", "prune_unstructured", "remove_skip", "save_checkpoint", "search",
    "simulate_reads", "skipclip_train", "sparsity", "throughput", "toy_model_config",
]
