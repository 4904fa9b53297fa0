"""Quantization hooks that plug quant_core into the toy forward pass."""

from dataclasses import dataclass, field

import numpy as np

from .quant_core import (
    ActivationTensor,
    QuantConfig,
    _quantize_at,
    compute_scale,
    dqa_dequantize_layer,
    dqa_quantize_layer,
)
from .errors import AllZeroLayer


def direct_skip_hook(n, skip=None, layers=None):
    """Direct n-bit round trip at capture points, leaving ``skip[layer]`` channels exact.

    ``layers`` limits which capture points are quantized (default: all).  The
    step still comes from the whole layer, skipped channels included.
    """
    skip = {k: set(np.atleast_1d(v).tolist()) if v is not None else set() for k, v in (skip or {}).items()}

    def hook(layer_id, acts):
        if layers is not None and layer_id not in layers:
            return acts
        t = ActivationTensor.from_feature_map(layer_id, acts)
        try:
            scale = compute_scale(t, n)
        except AllZeroLayer:
            return acts
        q, _ = _quantize_at(t.channels, scale.delta_n, n)
        out = scale.delta_n * q.astype(np.float64)
        keep = sorted(skip.get(layer_id, ()))
        out[keep] = t.channels[keep]
        return ActivationTensor(layer_id, out).to_feature_map(acts.shape)

    return hook


@dataclass
class LayerRecord:
    original: ActivationTensor
    quantized: object
    reconstructed: ActivationTensor


@dataclass
class Recorder:
    """Collects every (original, quantized, reconstructed) triple a hook produces."""

    records: dict = field(default_factory=dict)

    def add(self, layer_id, record):
        self.records.setdefault(layer_id, []).append(record)


def dqa_hook(config, important, recorder=None, encoders=None):
    """DQA round trip at every capture point.

    ``important`` maps layer id to channel indices; an empty mapping gives the
    Direct method through the same code path.  ``encoders`` optionally maps
    layer id to a fixed (static-mode) encoder.
    """
    if not isinstance(config, QuantConfig):
        raise TypeError("config must be a QuantConfig")
    encoders = encoders or {}

    def hook(layer_id, acts):
        t = ActivationTensor.from_feature_map(layer_id, acts)
        q = dqa_quantize_layer(t, config, important.get(layer_id, ()), encoders.get(layer_id))
        r = dqa_dequantize_layer(q)
        if recorder is not None:
            recorder.add(layer_id, LayerRecord(t, q, r))
        return r.to_feature_map(acts.shape)

    return hook
