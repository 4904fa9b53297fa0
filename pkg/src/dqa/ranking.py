"""Offline greedy ranking of activation channels by importance.

For each captured layer in forward order, every channel is tried as the one
channel left unquantized while the rest of the layer is quantized; the
accuracy obtained is that channel's score.  Earlier layers are quantized
too, each with its single best channel left exact.  Total cost is one
evaluation per channel per layer.
"""

import json
import math
from dataclasses import dataclass, field
from itertools import combinations

from .errors import EvaluatorFailure, ModelMismatch, UnknownLayer
from .pipeline import direct_skip_hook
from .toy import evaluate_accuracy

RANK_FORMAT = "dqa-rank/1"


@dataclass(frozen=True)
class RankTable:
    """``entries[layer_id]`` is a tuple of ``(channel, score)``, best first."""

    entries: dict
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for layer_id, ranked in self.entries.items():
            chans = sorted(c for c, _ in ranked)
            if chans != list(range(len(ranked))):
                raise ValueError(f"layer {layer_id!r}: channels are not a permutation")
            scores = [s for _, s in ranked]
            if any(a < b for a, b in zip(scores, scores[1:])):
                raise ValueError(f"layer {layer_id!r}: scores not sorted")

    @property
    def layers(self):
        return list(self.entries)

    def order(self, layer_id):
        if layer_id not in self.entries:
            raise UnknownLayer(layer_id)
        return [c for c, _ in self.entries[layer_id]]

    def dumps(self):
        """JSON lines: a header record, then one record per layer."""
        lines = [json.dumps({"format": RANK_FORMAT, **self.metadata}, sort_keys=True)]
        for layer_id, ranked in self.entries.items():
            rec = {"layer_id": layer_id, "channels": [c for c, _ in ranked], "scores": [s for _, s in ranked]}
            lines.append(json.dumps(rec))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text):
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty rank table")
        header = json.loads(lines[0])
        if header.pop("format", None) != RANK_FORMAT:
            raise ValueError("not a rank table file")
        entries = {}
        for ln in lines[1:]:
            rec = json.loads(ln)
            entries[rec["layer_id"]] = tuple(zip(rec["channels"], rec["scores"]))
        return cls(entries, header)


class ToyEvaluator:
    """Scores one skip choice on a toy model with Direct n-bit quantization.

    Capture points before ``layer_id`` keep their recorded most important
    channel exact, ``layer_id`` keeps ``channel`` exact, later capture points
    stay in full precision.
    """

    def __init__(self, n, batch_size=128):
        self.n = n
        self.batch_size = batch_size

    def __call__(self, model, layer_id, channel, most_important, dataset):
        idx = model.capture_points.index(layer_id)
        active = set(model.capture_points[: idx + 1])
        skip = {lid: most_important.get(lid) for lid in model.capture_points[:idx]}
        skip[layer_id] = channel
        hook = direct_skip_hook(self.n, skip, layers=active)
        return evaluate_accuracy(model, dataset, hook, self.batch_size)


class CountingEvaluator:
    """Wraps an evaluator and counts calls."""

    def __init__(self, inner):
        self.inner = inner
        self.calls = 0

    def __call__(self, *args):
        self.calls += 1
        return self.inner(*args)


def greedy_rank(model, dataset, config, evaluator=None, metadata=None):
    """Rank every capture point's channels; returns a :class:`RankTable`.

    ``evaluator(model, layer_id, channel, most_important, dataset)`` must
    return an accuracy in [0, 1].  The running best starts at 0 and only a
    strictly higher score replaces it, so the first channel reaching the
    maximum wins and a layer scoring 0 everywhere records no best channel.
    """
    evaluator = evaluator or ToyEvaluator(config.n)
    entries = {}
    most_important = {}
    for layer_id in model.capture_points:
        rank = []
        highest = 0.0
        best = None
        for channel in range(model.channel_count(layer_id)):
            try:
                acc = float(evaluator(model, layer_id, channel, dict(most_important), dataset))
            except Exception as exc:
                raise EvaluatorFailure(layer_id, channel, exc) from exc
            rank.append((channel, acc))
            if acc > highest:
                highest = acc
                best = channel
        if best is not None:
            most_important[layer_id] = best
        # stable sort keeps lower channel index first among equal scores
        entries[layer_id] = tuple(sorted(rank, key=lambda cs: -cs[1]))
    meta = {
        "target_bits": config.n,
        "extra_bits": config.m,
        "important_ratio": config.important_ratio,
        "sample_count": len(dataset),
    }
    meta.update(metadata or {})
    return RankTable(entries, meta)


def important_count(channel_count, ratio):
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must be in [0, 1], got {ratio}")
    # half-up, and guard against products like 0.4 * 10 = 4.000000000000001
    return min(channel_count, int(math.floor(round(ratio * channel_count, 9) + 0.5)))


def select_important(rank_table, layer_id, ratio):
    order = rank_table.order(layer_id)
    return frozenset(order[: important_count(len(order), ratio)])


def jaccard(a, b):
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def rank_stability_report(tables, ratio):
    """Mean pairwise Jaccard overlap of the selected sets, per layer."""
    if len(tables) < 2:
        raise ValueError("need at least two rank tables")
    shape = {lid: len(r) for lid, r in tables[0].entries.items()}
    for t in tables[1:]:
        if {lid: len(r) for lid, r in t.entries.items()} != shape:
            raise ModelMismatch("rank tables come from different models")
    report = {}
    for lid in shape:
        sets = [select_important(t, lid, ratio) for t in tables]
        pairs = [jaccard(a, b) for a, b in combinations(sets, 2)]
        report[lid] = sum(pairs) / len(pairs)
    return report
