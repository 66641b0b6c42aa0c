"""Compressed KV cache exchange between language-model agents."""

from .bitpack import PackedTensor, pack, unpack
from .calibration import CalibrationProfile, calibrate, compute_profile, select_mode
from .errors import QKVError, WireError
from .extraction import Fact, extract_facts, format_facts_summary
from .kv_model import AttentionMap, KvCache, SyntheticSpec, generate_attention, generate_cache, tensor_stats
from .layer_select import SelectionConfig, select_layers
from .memory import MemoryCache, content_hash, pressure_to_bits
from .pipeline import SenderConfig, TransferReport, integrate, receive, run_benchmark, send
from .quantizer import allocate_bits, dequantize, profile_sensitivity, quantize
from .wire import Payload, deserialize, payload_size, serialize

__version__ = "0.1.0"

__all__ = [
    "AttentionMap", "CalibrationProfile", "Fact", "KvCache", "MemoryCache", "PackedTensor",
    "Payload", "QKVError", "SelectionConfig", "SenderConfig", "SyntheticSpec", "TransferReport",
    "WireError", "allocate_bits", "calibrate", "compute_profile", "content_hash", "dequantize",
    "deserialize", "extract_facts", "format_facts_summary", "generate_attention", "generate_cache",
    "integrate", "pack", "payload_size", "pressure_to_bits", "profile_sensitivity", "quantize",
    "receive", "run_benchmark", "select_layers", "select_mode", "send", "serialize", "tensor_stats",
    "unpack",
]
