"""Identifier self-refinement loop.

One iteration: fine-tune a copy of the recommender on the two alignment
tasks, regenerate every item's identifier by constrained beam search over
the identifier grammar, assign candidates greedily so earlier items never
steal a later rank when a free one exists, eliminate leftover collisions
by appending fresh disambiguation tokens, then resume recommendation
training of the original model on the new map.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import Catalog, SplitDataset
from .decode import TrieIndex, beam_complete
from .identifiers import Identifier, IdentifierMap, disambig_token, token_namespace
from .prompts import PromptBuilder, alignment_training_pairs, rec_training_pairs
from .seeding import derive_seed
from .seqmodel import SequenceModel, perplexity, train_model
from .vocab import EOR, TokenVocabulary

log = logging.getLogger(__name__)

GRAMMAR_SIZE_LIMIT = 500_000


@dataclass
class RefineConfig:
    iterations: int = 1
    warmup_epochs: int = 40
    iter_epochs: int = 20
    align_epochs: int = 60
    candidates_k: int = 20
    beam_width: int = 0  # 0 -> same as candidates_k
    candidate_order: str = "perplexity"  # or "item_id"
    align_mix: str = "both"
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0


@dataclass
class RefinementReport:
    """Per-iteration record of what the regeneration pass did."""

    iteration: int
    candidates: dict[int, list[Identifier]]
    assignment_rank: dict[int, int]
    unresolved: list[int]
    pre_ca_collisions: int
    post_ca_collisions: int
    adjustment_ratio: float

    @property
    def exhaustion_rate(self) -> float:
        return len(self.unresolved) / max(len(self.candidates), 1)

    def to_json(self) -> str:
        payload = {
            "iteration": self.iteration,
            "adjustment_ratio": self.adjustment_ratio,
            "pre_ca_collisions": self.pre_ca_collisions,
            "post_ca_collisions": self.post_ca_collisions,
            "unresolved": sorted(self.unresolved),
            "exhaustion_rate": self.exhaustion_rate,
            "assignment_rank": {str(k): v for k, v in sorted(self.assignment_rank.items())},
            "candidates": {
                str(k): [list(ident) for ident in v] for k, v in sorted(self.candidates.items())
            },
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


def train_recommender(
    model: SequenceModel,
    cases: Sequence,
    id_map: IdentifierMap,
    epochs: int,
    lr: float = 1e-3,
    batch_size: int = 64,
    seed: int = 0,
) -> list[float]:
    """Next-item training on (history, target) cases rendered with ``id_map``."""
    if epochs == 0:
        return []
    builder = PromptBuilder(model.vocab)
    rng = np.random.default_rng(derive_seed(seed, "rec", "templates", id_map.version))
    pairs = rec_training_pairs(cases, id_map, builder, rng)
    return train_model(
        model,
        pairs,
        epochs,
        lr=lr,
        batch_size=batch_size,
        seed=derive_seed(seed, "rec", "sgd", id_map.version),
    )


def align_finetune(
    model: SequenceModel,
    catalog: Catalog,
    id_map: IdentifierMap,
    epochs: int,
    lr: float = 1e-3,
    batch_size: int = 64,
    seed: int = 0,
    mix: str = "both",
) -> SequenceModel:
    """Fine-tune a copy of ``model`` on the alignment tasks; the original is untouched."""
    aligned = model.clone()
    if epochs == 0:
        return aligned
    builder = PromptBuilder(aligned.vocab)
    rng = np.random.default_rng(derive_seed(seed, "align", "pairs", id_map.version))
    pairs = alignment_training_pairs(catalog, id_map, builder, rng, mix=mix)
    train_model(
        aligned,
        pairs,
        epochs,
        lr=lr,
        batch_size=batch_size,
        seed=derive_seed(seed, "align", "sgd", id_map.version),
    )
    return aligned


def identifier_grammar(id_map: IdentifierMap, vocab: TokenVocabulary) -> TrieIndex:
    """Trie of all well-formed identifier candidates.

    Well-formed means: the namespace shape (depth-tagged levels, ordinal)
    of some existing identifier, filled with any registered tokens of those
    namespaces.  Trailing disambiguation tokens are stripped from shapes;
    fresh candidates never carry them.
    """
    shapes: set[tuple] = set()
    for ident in id_map.entries.values():
        core = list(ident)
        while core and token_namespace(core[-1]) == ("disambig",):
            core.pop()
        if core:
            shapes.add(tuple(token_namespace(tok) for tok in core))
    if not shapes:
        raise ValueError("identifier map holds no usable identifier shapes")

    alphabets: dict[tuple, list[int]] = {}
    for shape in shapes:
        for namespace in shape:
            if namespace not in alphabets:
                alphabets[namespace] = vocab.encode(vocab.in_namespace(namespace))

    total = sum(math.prod(len(alphabets[ns]) for ns in shape) for shape in shapes)
    if total > GRAMMAR_SIZE_LIMIT:
        raise ValueError(f"identifier grammar too large ({total} sequences)")

    trie = TrieIndex(eor_id=vocab.id(EOR))

    def expand(shape: tuple, prefix: list[int]) -> None:
        if len(prefix) == len(shape):
            trie.insert(prefix, True)
            return
        for token_id in alphabets[shape[len(prefix)]]:
            expand(shape, prefix + [token_id])

    for shape in sorted(shapes):
        expand(shape, [])
    return trie


def generate_candidates(
    model: SequenceModel,
    item,
    grammar: TrieIndex,
    k: int = 20,
    beam_width: int | None = None,
) -> list[Identifier]:
    """Top-k well-formed identifiers for one item, ranked by the aligned model.

    Returns fewer than ``k`` when the grammar holds fewer sequences.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    builder = PromptBuilder(model.vocab)
    pair = builder.item2id_prompt(item, identifier=None)
    width = max(k, beam_width or 0)
    completed = beam_complete(model, pair.instruction, grammar, width)
    return [tuple(model.vocab.decode(c.tokens)) for c in completed[:k]]


def assign_diverse(
    candidates: dict[int, list[Identifier]], item_order: Sequence[int]
) -> tuple[dict[int, Identifier], dict[int, int], set[int]]:
    """Greedy first-available assignment scanning each ranked list front to back.

    Items whose whole list is already taken receive their top-ranked
    candidate and are returned in the unresolved set for collision
    avoidance.  Returns (entries, rank used per item, unresolved).
    """
    taken: set[Identifier] = set()
    entries: dict[int, Identifier] = {}
    ranks: dict[int, int] = {}
    unresolved: set[int] = set()
    for item_id in item_order:
        ranked = candidates[item_id]
        if not ranked:
            raise ValueError(f"item {item_id} has an empty candidate list")
        for rank, ident in enumerate(ranked):
            if ident not in taken:
                entries[item_id] = ident
                ranks[item_id] = rank
                taken.add(ident)
                break
        else:
            entries[item_id] = ranked[0]
            ranks[item_id] = 0
            unresolved.add(item_id)
    return entries, ranks, unresolved


def collision_avoidance(
    id_map: IdentifierMap,
    vocab: TokenVocabulary | None = None,
    unresolved: set[int] | None = None,
) -> IdentifierMap:
    """Make the map injective by appending fresh disambiguation tokens.

    In each colliding group the lowest item id keeps the bare identifier;
    the rest get one fresh token each.  Fresh tokens are registered in
    ``vocab`` when one is provided.  ``unresolved`` is informational: a
    collision outside it indicates an assignment bug and is logged.
    """
    entries = dict(id_map.entries)
    groups = id_map.colliding_groups()
    next_index = id_map_max_disambig(id_map) + 1
    if vocab is not None:
        next_index = max(next_index, vocab.max_disambig_index() + 1)
    for group in groups:
        if unresolved is not None:
            outside = [i for i in group if i not in unresolved]
            if len(outside) > 1:  # at most the original holder may sit outside
                log.warning("collision among items outside the unresolved set: %s", outside)
        for item_id in group[1:]:  # groups are sorted; lowest id keeps the identifier
            token = disambig_token(next_index)
            next_index += 1
            entries[item_id] = entries[item_id] + (token,)
            if vocab is not None:
                vocab.add(token)
    result = IdentifierMap(entries=entries, version=id_map.version, source=id_map.source)
    if not result.is_injective():
        raise AssertionError("collision avoidance failed to produce an injective map")
    return result


def id_map_max_disambig(id_map: IdentifierMap) -> int:
    best = -1
    for ident in id_map.entries.values():
        for tok in ident:
            if token_namespace(tok) == ("disambig",):
                best = max(best, int(tok[3:-1]))
    return best


def adjustment_ratio(old_map: IdentifierMap, new_map: IdentifierMap) -> float:
    """Fraction of items whose identifier changed between two map versions."""
    if set(old_map.entries) != set(new_map.entries):
        raise ValueError("maps cover different catalogs")
    if not old_map.entries:
        return 0.0
    changed = sum(1 for item_id in old_map.entries if old_map[item_id] != new_map[item_id])
    return changed / len(old_map.entries)


def _candidate_order(
    aligned: SequenceModel,
    catalog: Catalog,
    id_map: IdentifierMap,
    mode: str,
) -> list[int]:
    item_ids = sorted(catalog.items)
    if mode == "item_id":
        return item_ids
    if mode != "perplexity":
        raise ValueError(f"unknown candidate order {mode!r}")
    builder = PromptBuilder(aligned.vocab)
    scored = []
    for item_id in item_ids:
        pair = builder.item2id_prompt(catalog.items[item_id], id_map[item_id])
        scored.append((perplexity(aligned, pair.instruction, pair.response), item_id))
    scored.sort()
    return [item_id for _, item_id in scored]


def regenerate_identifiers(
    aligned: SequenceModel,
    catalog: Catalog,
    id_map: IdentifierMap,
    config: RefineConfig,
    vocab: TokenVocabulary,
    iteration: int,
) -> tuple[IdentifierMap, RefinementReport]:
    """Beam-regenerate, assign diversely, and eliminate collisions.

    ``vocab`` is the main model's table: fresh disambiguation tokens are
    registered there, not in the aligned copy's.
    """
    grammar = identifier_grammar(id_map, aligned.vocab)
    candidates = {
        item_id: generate_candidates(
            aligned,
            catalog.items[item_id],
            grammar,
            k=config.candidates_k,
            beam_width=config.beam_width or None,
        )
        for item_id in sorted(catalog.items)
    }
    order = _candidate_order(aligned, catalog, id_map, config.candidate_order)
    entries, ranks, unresolved = assign_diverse(candidates, order)
    draft = IdentifierMap(entries=entries, version=iteration, source=f"refined-{iteration}")
    pre_ca = sum(len(group) for group in draft.colliding_groups())
    refined = collision_avoidance(draft, vocab=vocab, unresolved=unresolved)
    post_ca = sum(len(group) for group in refined.colliding_groups())
    report = RefinementReport(
        iteration=iteration,
        candidates=candidates,
        assignment_rank=ranks,
        unresolved=sorted(unresolved),
        pre_ca_collisions=pre_ca,
        post_ca_collisions=post_ca,
        adjustment_ratio=adjustment_ratio(id_map, refined),
    )
    if report.post_ca_collisions != 0:
        raise AssertionError("collision count must be zero after collision avoidance")
    if report.exhaustion_rate > 0.05:
        log.info(
            "candidate lists exhausted for %.1f%% of items", 100 * report.exhaustion_rate
        )
    return refined, report


def refine_iterations(
    model: SequenceModel,
    id_map: IdentifierMap,
    catalog: Catalog,
    split: SplitDataset,
    config: RefineConfig,
    checkpoint: Callable[[int, SequenceModel, IdentifierMap, "RefinementReport | None"], None] | None = None,
) -> tuple[IdentifierMap, list[RefinementReport]]:
    """Run the refinement iterations on an already warmed-up model.

    Each iteration aligns a copy, regenerates the map, then resumes
    recommendation training of the main model on the new map.  The model
    is mutated in place; the final map and per-iteration reports are
    returned.
    """
    reports: list[RefinementReport] = []
    for iteration in range(1, config.iterations + 1):
        aligned = align_finetune(
            model,
            catalog,
            id_map,
            config.align_epochs,
            lr=config.lr,
            batch_size=config.batch_size,
            seed=config.seed,
            mix=config.align_mix,
        )
        new_map, report = regenerate_identifiers(
            aligned, catalog, id_map, config, model.vocab, iteration
        )
        model.grow_vocab()
        train_recommender(
            model,
            split.train,
            new_map,
            config.iter_epochs,
            lr=config.lr,
            batch_size=config.batch_size,
            seed=config.seed,
        )
        id_map = new_map
        reports.append(report)
        log.info(
            "iteration %d: adjustment ratio %.3f, %d unresolved, map injective",
            iteration,
            report.adjustment_ratio,
            len(report.unresolved),
        )
        if checkpoint is not None:
            checkpoint(iteration, model, id_map, report)
    return id_map, reports


def self_improve(
    model: SequenceModel,
    id_map: IdentifierMap,
    catalog: Catalog,
    split: SplitDataset,
    config: RefineConfig,
    checkpoint: Callable[[int, SequenceModel, IdentifierMap, "RefinementReport | None"], None] | None = None,
) -> tuple[IdentifierMap, list[RefinementReport]]:
    """Warm-up recommendation training followed by the refinement iterations."""
    train_recommender(
        model,
        split.train,
        id_map,
        config.warmup_epochs,
        lr=config.lr,
        batch_size=config.batch_size,
        seed=config.seed,
    )
    if checkpoint is not None:
        checkpoint(0, model, id_map, None)
    return refine_iterations(model, id_map, catalog, split, config, checkpoint=checkpoint)
