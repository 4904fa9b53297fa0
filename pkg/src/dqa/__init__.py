"""Deep sub-6-bit quantization of activations with Huffman-coded shifting errors."""

from .errors import DQAError
from .huffman import (
    EncodedStream,
    HuffmanTable,
    SymbolHistogram,
    build_histogram,
    build_static_table,
    build_table,
    compression_ratio,
    decode,
    encode,
)
from .quant_core import (
    ActivationTensor,
    ErrorLookupTable,
    HuffmanMode,
    QuantConfig,
    QuantizedLayer,
    ScaleParams,
    ShiftResult,
    compute_scale,
    direct_dequantize,
    direct_quantize,
    dqa_dequantize_layer,
    dqa_quantize_layer,
    lookup_error,
    measure_quant_error,
    shift_right_with_error,
)
from .ranking import RankTable, greedy_rank, rank_stability_report, select_important
from .storage import deserialize, memory_report, serialize

__version__ = "0.1.0"
