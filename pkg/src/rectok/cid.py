"""Hierarchical spectral-clustering identifier initializer over the co-occurrence graph.

The co-occurrence matrix counts distinct unordered item pairs per user
sequence.  Nodes larger than a threshold are split by spectral clustering
on the symmetric normalized Laplacian; the child label at each depth
becomes one identifier token, and a final within-leaf ordinal token makes
identifiers unique.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .cluster import kmeans
from .corpus import InteractionSequence
from .identifiers import IdentifierMap, level_token, ordinal_token
from .seeding import derive_seed

log = logging.getLogger(__name__)

DEFAULT_BRANCHING = 8
DEFAULT_THRESHOLD = 8
DEFAULT_DEPTH_CAP = 8


class DepthCapExceeded(RuntimeError):
    """Raised when recursive splitting fails to reach the leaf threshold."""


@dataclass
class ClusterNode:
    """One node of the splitting tree; children partition the members."""

    members: list[int]
    depth: int
    path: tuple[int, ...] = ()
    children: dict[int, "ClusterNode"] = field(default_factory=dict)

    @property
    def is_leaf(self) -> bool:
        return not self.children


def build_cooccurrence(
    sequences: Iterable[InteractionSequence], item_order: Sequence[int]
) -> np.ndarray:
    """Count, for each unordered item pair, the sequences containing both.

    Duplicate occurrences inside one sequence count the pair once.  The
    result is symmetric with a zero diagonal, indexed by ``item_order``.
    """
    index = {item_id: i for i, item_id in enumerate(item_order)}
    if len(index) != len(item_order):
        raise ValueError("item_order contains duplicates")
    matrix = np.zeros((len(item_order), len(item_order)), dtype=np.int64)
    for seq in sequences:
        distinct = sorted({item for item in seq.items})
        for a_pos, a in enumerate(distinct):
            if a not in index:
                raise ValueError(f"sequence for user {seq.user_id} references unknown item {a}")
            for b in distinct[a_pos + 1 :]:
                i, j = index[a], index[b]
                matrix[i, j] += 1
                matrix[j, i] += 1
    return matrix


def spectral_cluster(matrix: np.ndarray, branching: int, rng: np.random.Generator) -> np.ndarray:
    """Label rows of an affinity matrix with ``branching`` clusters.

    Uses the ``branching`` smallest eigenvectors of the symmetric
    normalized Laplacian followed by seeded k-means.  Zero-degree rows are
    assigned the reserved label ``branching`` and logged.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    n = matrix.shape[0]
    if matrix.shape != (n, n):
        raise ValueError("affinity matrix must be square")
    if n < branching:
        raise ValueError(f"need at least {branching} rows, got {n}")
    degrees = matrix.sum(axis=1)
    positive = degrees > 0
    labels = np.full(n, branching, dtype=np.int64)
    n_pos = int(positive.sum())
    if n_pos < n:
        log.info("%d zero-degree rows assigned to the reserved bucket", n - n_pos)
    if n_pos == 0:
        return labels
    if n_pos <= branching:
        labels[np.flatnonzero(positive)] = np.arange(n_pos)
        return labels

    sub = matrix[np.ix_(positive, positive)]
    inv_sqrt = 1.0 / np.sqrt(degrees[positive])
    lap = np.eye(n_pos) - inv_sqrt[:, None] * sub * inv_sqrt[None, :]
    lap = (lap + lap.T) / 2.0
    _, vectors = np.linalg.eigh(lap)
    embedding = vectors[:, :branching]
    row_norms = np.linalg.norm(embedding, axis=1)
    safe = row_norms > 1e-12
    embedding = embedding.copy()
    embedding[safe] /= row_norms[safe, None]
    _, sub_labels = kmeans(embedding, branching, rng)
    labels[np.flatnonzero(positive)] = sub_labels
    return labels


def _fallback_groups(members: list[int], branching: int, threshold: int) -> dict[int, list[int]]:
    """Deterministic round-robin split used when clustering makes no progress."""
    n_groups = min(branching, max(2, -(-len(members) // threshold)))
    groups: dict[int, list[int]] = {g: [] for g in range(n_groups)}
    for pos, item in enumerate(sorted(members)):
        groups[pos % n_groups].append(item)
    return groups


def hierarchical_tokenize(
    matrix: np.ndarray,
    item_order: Sequence[int],
    threshold: int = DEFAULT_THRESHOLD,
    branching: int = DEFAULT_BRANCHING,
    seed: int = 0,
    depth_cap: int = DEFAULT_DEPTH_CAP,
) -> tuple[ClusterNode, IdentifierMap]:
    """Recursively split the catalog and assign depth-tagged identifiers.

    Token at depth ``l`` is the child label on the path; a final ordinal
    token disambiguates leaf members, so the returned map is injective.
    """
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    if branching < 2:
        raise ValueError("branching must be >= 2")
    index = {item_id: i for i, item_id in enumerate(item_order)}
    entries: dict[int, tuple[str, ...]] = {}

    def split(node: ClusterNode) -> None:
        if len(node.members) <= threshold:
            for rank, item_id in enumerate(sorted(node.members)):
                tokens = [level_token(d, lab) for d, lab in enumerate(node.path)]
                tokens.append(ordinal_token(rank))
                entries[item_id] = tuple(tokens)
            return
        if node.depth >= depth_cap:
            raise DepthCapExceeded(
                f"node at depth {node.depth} (path {node.path}) still holds "
                f"{len(node.members)} items > threshold {threshold}"
            )
        rng = np.random.default_rng(derive_seed(seed, "cid", *node.path))
        rows = [index[item_id] for item_id in node.members]
        sub = matrix[np.ix_(rows, rows)]
        labels = spectral_cluster(sub, branching, rng)
        groups: dict[int, list[int]] = {}
        for item_id, label in zip(node.members, labels):
            groups.setdefault(int(label), []).append(item_id)
        if len(groups) < 2:
            log.warning(
                "spectral split made no progress on %d items at depth %d; "
                "falling back to an ordinal split",
                len(node.members),
                node.depth,
            )
            groups = _fallback_groups(node.members, branching, threshold)
        for label in sorted(groups):
            child = ClusterNode(
                members=groups[label], depth=node.depth + 1, path=node.path + (label,)
            )
            node.children[label] = child
            split(child)

    root = ClusterNode(members=list(item_order), depth=0)
    split(root)
    id_map = IdentifierMap(entries=entries, version=0, source="cid")
    if not id_map.is_injective():
        raise AssertionError("hierarchical tokenization produced duplicate identifiers")
    return root, id_map


def dump_tree(node: ClusterNode, indent: int = 0) -> str:
    """Render the splitting tree as indented text for inspection."""
    pad = "  " * indent
    if node.is_leaf:
        members = " ".join(str(i) for i in sorted(node.members))
        return f"{pad}leaf depth={node.depth} items=[{members}]"
    lines = [f"{pad}node depth={node.depth} size={len(node.members)}"]
    for label in sorted(node.children):
        lines.append(f"{pad}  [{label}]")
        lines.append(dump_tree(node.children[label], indent + 2))
    return "\n".join(lines)
