"""Deterministic semantic-embedding providers.

``TextEmbedder`` hashes an item's bag of words into a fixed bucket space
and applies a seeded random projection; ``CfEmbedder`` projects an item's
co-occurrence row.  Both are stand-ins for learned encoders: the only
property downstream math relies on is "similar input -> similar vector",
plus full determinism.
"""

from __future__ import annotations

import hashlib
import logging
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_DIM = 16
_N_BUCKETS = 512


def _word_bucket(word: str) -> int:
    digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % _N_BUCKETS


class TextEmbedder:
    """Hashed bag-of-words with a seeded Gaussian projection; output is unit-norm."""

    def __init__(self, dim: int = DEFAULT_DIM, seed: int = 0) -> None:
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.seed = seed
        rng = np.random.default_rng(seed)
        self._projection = rng.normal(size=(_N_BUCKETS, dim)) / np.sqrt(_N_BUCKETS)
        self._bucket_owner: dict[int, str] = {}
        self.collisions: list[tuple[str, str]] = []

    def _note_bucket(self, bucket: int, word: str) -> None:
        owner = self._bucket_owner.get(bucket)
        if owner is None:
            self._bucket_owner[bucket] = word
        elif owner != word:
            self.collisions.append((owner, word))
            log.warning("hash collision between words %r and %r", owner, word)

    def embed(self, words: Sequence[str]) -> np.ndarray:
        if len(words) == 0:
            raise ValueError("cannot embed an empty word list")
        counts = np.zeros(_N_BUCKETS, dtype=np.float64)
        for word in words:
            bucket = _word_bucket(word)
            self._note_bucket(bucket, word)
            counts[bucket] += 1.0
        vec = counts @ self._projection
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            raise ValueError("degenerate projection produced a zero vector")
        return vec / norm


def embed_text(words: Sequence[str], dim: int = DEFAULT_DIM, seed: int = 0) -> np.ndarray:
    """One-shot convenience wrapper around :class:`TextEmbedder`."""
    return TextEmbedder(dim=dim, seed=seed).embed(words)


def embed_catalog(catalog, dim: int = DEFAULT_DIM, seed: int = 0) -> dict[int, np.ndarray]:
    """Embed every item's text feature with one shared embedder."""
    embedder = TextEmbedder(dim=dim, seed=seed)
    return {item_id: embedder.embed(item.text_feature) for item_id, item in sorted(catalog.items.items())}


class CfEmbedder:
    """Collaborative embedding from a co-occurrence row, truncated to ``dim`` dims.

    Rows are L2-normalized before the seeded projection.  Items whose row
    is all zero get a zero vector and are flagged as CF-cold.
    """

    def __init__(self, n_items: int, dim: int = DEFAULT_DIM, seed: int = 0) -> None:
        if n_items < 1 or dim < 1:
            raise ValueError("n_items and dim must be positive")
        self.dim = dim
        rng = np.random.default_rng(seed)
        self._projection = rng.normal(size=(n_items, dim)) / np.sqrt(n_items)
        self.cold_items: set[int] = set()

    def embed(self, item_id: int, row: np.ndarray) -> np.ndarray:
        row = np.asarray(row, dtype=np.float64)
        if row.shape != (self._projection.shape[0],):
            raise ValueError(f"row has shape {row.shape}, expected ({self._projection.shape[0]},)")
        norm = np.linalg.norm(row)
        if norm == 0.0:
            self.cold_items.add(item_id)
            log.info("item %d has no co-occurrences; CF embedding is zero", item_id)
            return np.zeros(self.dim)
        vec = (row / norm) @ self._projection
        out_norm = np.linalg.norm(vec)
        if out_norm == 0.0:
            self.cold_items.add(item_id)
            return np.zeros(self.dim)
        return vec / out_norm


def save_embeddings(path: str | Path, embeddings: dict[int, np.ndarray]) -> None:
    """Write an embedding cache: ``item_id<TAB>v1 v2 ... vD`` per line."""
    lines = []
    for item_id in sorted(embeddings):
        values = " ".join(format(v, ".17g") for v in embeddings[item_id])
        lines.append(f"{item_id}\t{values}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_embeddings(path: str | Path) -> dict[int, np.ndarray]:
    embeddings: dict[int, np.ndarray] = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        if not raw.strip():
            continue
        item_field, values = raw.split("\t")
        embeddings[int(item_field)] = np.array([float(v) for v in values.split()])
    return embeddings
