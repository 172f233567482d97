"""Ranking and identifier-quality metrics.

Predictions are ranked item-id lists, one per test case; every case has a
single ground-truth item (leave-one-out), so the ideal DCG is 1 and
``0 <= ndcg@k <= recall@k`` holds.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .identifiers import IdentifierMap

KEY_ORDER = [
    "recall@5",
    "recall@10",
    "ndcg@5",
    "ndcg@10",
    "coverage@5",
    "coverage@10",
    "coverage@GT",
    "semantic_identifier_similarity",
    "collision_rate",
    "adjustment_ratio",
]


def _check_cases(predictions: Sequence[Sequence[int]], truths: Sequence[int], k: int) -> None:
    if len(predictions) != len(truths):
        raise ValueError("one prediction list per truth is required")
    if not truths:
        raise ValueError("no test cases")
    if k < 1:
        raise ValueError("k must be >= 1")


def recall_at_k(predictions: Sequence[Sequence[int]], truths: Sequence[int], k: int) -> float:
    """Mean over cases of whether the truth appears in the top-k."""
    _check_cases(predictions, truths, k)
    hits = sum(1 for preds, truth in zip(predictions, truths) if truth in list(preds)[:k])
    return hits / len(truths)


def ndcg_at_k(predictions: Sequence[Sequence[int]], truths: Sequence[int], k: int) -> float:
    """Mean of 1/log2(rank+1) for hits within the top-k, else 0."""
    _check_cases(predictions, truths, k)
    total = 0.0
    for preds, truth in zip(predictions, truths):
        top = list(preds)[:k]
        if truth in top:
            rank = top.index(truth) + 1
            total += 1.0 / math.log2(rank + 1)
    return total / len(truths)


def coverage_at_k(
    predictions: Sequence[Sequence[int]], catalog_items: Iterable[int], k: int
) -> float:
    """Fraction of the catalog appearing in any case's top-k."""
    catalog = set(catalog_items)
    if not catalog:
        raise ValueError("empty catalog")
    covered = set()
    for preds in predictions:
        covered.update(list(preds)[:k])
    return len(covered & catalog) / len(catalog)


def coverage_gt(truths: Sequence[int], catalog_items: Iterable[int]) -> float:
    """Fraction of the catalog appearing as a ground-truth target."""
    catalog = set(catalog_items)
    if not catalog:
        raise ValueError("empty catalog")
    return len(set(truths) & catalog) / len(catalog)


def collision_rate(id_map: IdentifierMap) -> float:
    """Fraction of items whose identifier is shared by two or more items."""
    if not id_map.entries:
        raise ValueError("empty identifier map")
    counts = Counter(id_map.entries.values())
    shared = sum(1 for ident in id_map.entries.values() if counts[ident] >= 2)
    return shared / len(id_map.entries)


def token_overlap(a: Sequence[str], b: Sequence[str]) -> int:
    """Multiset intersection size of two token lists."""
    return sum((Counter(a) & Counter(b)).values())


def semantic_identifier_similarity(
    id_map: IdentifierMap, embeddings: dict[int, np.ndarray]
) -> float:
    """Cosine-weighted average token overlap between item identifiers.

    Weights are pairwise embedding cosines clamped to [0, 1]; the diagonal
    is excluded from both sums.
    """
    item_ids = sorted(id_map.entries)
    if len(item_ids) < 2:
        raise ValueError("need at least two items")
    vectors = np.stack([np.asarray(embeddings[i], dtype=np.float64) for i in item_ids])
    norms = np.linalg.norm(vectors, axis=1)
    if (norms == 0.0).any():
        raise ValueError("zero-norm embedding; cosine similarity undefined")
    unit = vectors / norms[:, None]
    weights = np.clip(unit @ unit.T, 0.0, 1.0)
    np.fill_diagonal(weights, 0.0)
    denominator = weights.sum()
    if denominator == 0.0:
        raise ValueError("all pairwise weights are zero")
    overlap = np.zeros_like(weights)
    idents = [id_map[i] for i in item_ids]
    for a in range(len(item_ids)):
        for b in range(a + 1, len(item_ids)):
            overlap[a, b] = overlap[b, a] = token_overlap(idents[a], idents[b])
    return float((weights * overlap).sum() / denominator)


@dataclass
class MetricReport:
    """Metric values plus provenance stamps, serializable as key-value text."""

    values: dict[str, float]
    stamps: dict[str, str] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = ["# metric-report v1"]
        for key in sorted(self.stamps):
            lines.append(f"# {key}: {self.stamps[key]}")
        ordered = [k for k in KEY_ORDER if k in self.values]
        ordered += sorted(set(self.values) - set(ordered))
        for key in ordered:
            lines.append(f"{key}\t{format(self.values[key], '.10g')}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "MetricReport":
        values: dict[str, float] = {}
        stamps: dict[str, str] = {}
        for raw in Path(path).read_text(encoding="utf-8").splitlines():
            line = raw.strip()
            if not line or line == "# metric-report v1":
                continue
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                stamps[key.strip()] = value.strip()
                continue
            key, value = line.split("\t")
            values[key] = float(value)
        return cls(values=values, stamps=stamps)


def compute_report(
    predictions: Sequence[Sequence[int]],
    truths: Sequence[int],
    catalog_items: Iterable[int],
    id_map: IdentifierMap,
    embeddings: dict[int, np.ndarray],
    ks: Sequence[int] = (5, 10),
    stamps: dict[str, str] | None = None,
    previous_map: IdentifierMap | None = None,
) -> MetricReport:
    """Assemble the full metric suite for one evaluation run."""
    from .refine import adjustment_ratio  # local import avoids a cycle

    catalog = list(catalog_items)
    values: dict[str, float] = {}
    for k in ks:
        values[f"recall@{k}"] = recall_at_k(predictions, truths, k)
        values[f"ndcg@{k}"] = ndcg_at_k(predictions, truths, k)
        values[f"coverage@{k}"] = coverage_at_k(predictions, catalog, k)
    values["coverage@GT"] = coverage_gt(truths, catalog)
    values["semantic_identifier_similarity"] = semantic_identifier_similarity(id_map, embeddings)
    values["collision_rate"] = collision_rate(id_map)
    if previous_map is not None:
        values["adjustment_ratio"] = adjustment_ratio(previous_map, id_map)
    return MetricReport(values=values, stamps=dict(stamps or {}))


def render_comparison(reports: dict[str, MetricReport]) -> str:
    """Aligned table of several runs' metrics, one column per run."""
    names = list(reports)
    keys = [k for k in KEY_ORDER if any(k in r.values for r in reports.values())]
    extra = sorted({k for r in reports.values() for k in r.values} - set(keys))
    keys += extra
    width_metric = max(len("metric"), *(len(k) for k in keys)) if keys else len("metric")
    widths = [max(len(name), 10) for name in names]
    header = "metric".ljust(width_metric) + "".join(
        "  " + name.rjust(w) for name, w in zip(names, widths)
    )
    rows = [header, "-" * len(header)]
    for key in keys:
        cells = []
        for name, w in zip(names, widths):
            value = reports[name].values.get(key)
            cells.append(("-" if value is None else format(value, ".4f")).rjust(w))
        rows.append(key.ljust(width_metric) + "".join("  " + c for c in cells))
    return "\n".join(rows)
