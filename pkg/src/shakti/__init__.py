"""Quantized inference engine for the Shakti small-LM architecture family."""
from .attention import KvCache, SparsePattern, build_rope_table, build_sparse_mask, gqa_attend, sparse_attend
from .model import (PRESETS, AttentionKind, GenerationParams, Mode, Model, ModelConfig, build_model,
                    count_params, generate, get_preset, random_weights, sample_token)
from .quant import (BlockFormat, QuantizedTensor, compression_ratio, dequantize_tensor, qdot_row, qmatmul,
                    qmatvec, quantize_tensor)
from .store import ModelFile, open_model, quantize_model, validate, write_model

__version__ = "0.1.0"
