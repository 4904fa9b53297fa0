"""Regenerate the frozen blobs. Only run this when the format version changes."""

import json
from pathlib import Path

import numpy as np

from dqa.quant_core import ActivationTensor, QuantConfig, dqa_quantize_layer
from dqa.storage import serialize

HERE = Path(__file__).parent

CASES = {
    "golden_dqa": (QuantConfig(3, 3, 0.5), (0, 2)),
    "golden_direct": (QuantConfig(4, 0, 0.0), ()),
}


def source():
    x = np.linspace(-1.0, 1.0, 24).reshape(4, 6) ** 3
    return ActivationTensor("conv1", x)


def main():
    for name, (cfg, important) in CASES.items():
        q = dqa_quantize_layer(source(), cfg, important)
        (HERE / f"{name}.hex").write_text(serialize(q).hex() + "\n")
        expected = {
            "layer_id": q.layer_id,
            "n": q.n,
            "m": q.m,
            "absmax": q.scale.absmax,
            "important": list(q.important),
            "values": q.values.tolist(),
            "code_lengths": list(q.huffman_table.code_lengths) if q.huffman_table else None,
            "symbol_count": q.error_stream.symbol_count if q.error_stream else None,
            "bit_count": q.error_stream.bit_count if q.error_stream else None,
        }
        (HERE / f"{name}.json").write_text(json.dumps(expected, indent=1) + "\n")


if __name__ == "__main__":
    main()
