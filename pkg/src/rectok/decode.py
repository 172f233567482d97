"""Prefix tree over identifiers and trie-constrained beam decoding.

Every root-to-terminal path spells one identifier; a terminal is claimed
by taking the end-of-response token, so identifiers of different lengths
(and prefix-nested identifiers created by collision avoidance) coexist.
Beam expansion scores hypotheses by summed log-probabilities; completed
sequences are re-scored one at a time through the same path the
perplexity oracle uses, then ranked by length-normalized perplexity
ascending with lexicographic token-id tie-breaks.  Every emitted sequence
is a complete trie path, so decoding cannot produce an unknown item.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import torch
import torch.nn.functional as F

from .identifiers import IdentifierMap
from .prompts import PromptPair
from .seqmodel import SequenceModel, nll_loss
from .vocab import EOR, TokenVocabulary


class TrieNode:
    __slots__ = ("children", "payload")

    def __init__(self) -> None:
        self.children: dict[int, TrieNode] = {}
        self.payload = None


class TrieIndex:
    """Token-id prefix tree; terminal nodes carry a payload (item id or True)."""

    def __init__(self, eor_id: int) -> None:
        self.root = TrieNode()
        self.eor_id = eor_id
        self.n_paths = 0

    def insert(self, token_ids: Sequence[int], payload) -> None:
        node = self.root
        for token_id in token_ids:
            node = node.children.setdefault(token_id, TrieNode())
        if node.payload is None:
            node.payload = payload
            self.n_paths += 1
        elif node.payload != payload:
            raise ValueError("conflicting payloads for one trie path")

    def paths(self) -> Iterator[tuple[tuple[int, ...], object]]:
        """All (token ids, payload) paths in lexicographic token order."""

        def walk(node: TrieNode, prefix: tuple[int, ...]):
            if node.payload is not None:
                yield prefix, node.payload
            for token_id in sorted(node.children):
                yield from walk(node.children[token_id], prefix + (token_id,))

        yield from walk(self.root, ())

    @classmethod
    def from_identifier_map(cls, id_map: IdentifierMap, vocab: TokenVocabulary) -> "TrieIndex":
        if not id_map.is_injective():
            raise ValueError("identifier map has collisions; run collision avoidance first")
        trie = cls(eor_id=vocab.id(EOR))
        for item_id in sorted(id_map.entries):
            trie.insert(vocab.encode(id_map[item_id]), item_id)
        return trie


@dataclass(frozen=True)
class Completed:
    tokens: tuple[int, ...]
    payload: object
    perplexity: float


def beam_complete(
    model: SequenceModel,
    instruction: Sequence[int],
    trie: TrieIndex,
    width: int,
) -> list[Completed]:
    """All trie paths reached by a width-limited constrained beam, ranked.

    With ``width`` at least the number of live trie nodes per depth no
    hypothesis is ever pruned, so the result equals exhaustive scoring.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    if not trie.root.children and trie.root.payload is None:
        raise ValueError("empty trie")
    instruction = tuple(instruction)
    active: list[tuple[TrieNode, tuple[int, ...], float]] = [(trie.root, (), 0.0)]
    completed: list[tuple[tuple[int, ...], object]] = []
    while active:
        contexts = torch.tensor(
            [list(instruction) + list(tokens) for _, tokens, _ in active], dtype=torch.long
        )
        with torch.no_grad():
            log_probs = F.log_softmax(model(contexts)[:, -1, :], dim=-1)
        expansions: list[tuple[TrieNode, tuple[int, ...], float]] = []
        for (node, tokens, score), row in zip(active, log_probs):
            if node.payload is not None:
                completed.append((tokens, node.payload))
            for token_id in sorted(node.children):
                expansions.append(
                    (node.children[token_id], tokens + (token_id,), score + float(row[token_id]))
                )
        expansions.sort(key=lambda e: (-e[2], e[1]))
        active = expansions[:width]

    results = []
    for tokens, payload in completed:
        scored = tokens + (trie.eor_id,)
        with torch.no_grad():
            nll = float(nll_loss(model, PromptPair(instruction, scored, task="score")))
        results.append(Completed(tokens, payload, math.exp(nll / len(scored))))
    results.sort(key=lambda c: (c.perplexity, c.tokens))
    return results


def constrained_beam_search(
    model: SequenceModel,
    instruction: Sequence[int],
    trie: TrieIndex,
    width: int,
) -> list[tuple[int, float]]:
    """Ranked (item_id, perplexity) list; at most ``width`` entries."""
    candidates = beam_complete(model, instruction, trie, width)
    ranked = [(c.payload, c.perplexity) for c in candidates[:width]]
    seen = {item for item, _ in ranked}
    if len(seen) != len(ranked):
        raise AssertionError("duplicate items emitted from an injective trie")
    return ranked
