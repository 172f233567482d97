"""Structured prompt construction for the recommendation and alignment tasks.

Prompts are token-id streams.  The 15 recommendation templates are
distinct control-token pairs framing the history; history identifiers are
separated by ``<sep>``.  Every response ends with ``<eor>`` so that
variable-length identifiers stay decodable, and loss is computed on
response tokens only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .corpus import Catalog, Item, SplitCase
from .identifiers import Identifier, IdentifierMap
from .vocab import (
    EOR,
    ID2ITEM_BOS,
    ID2ITEM_EOS,
    ITEM2ID_BOS,
    ITEM2ID_EOS,
    N_TEMPLATES,
    SEP,
    TokenVocabulary,
    template_bos,
    template_eos,
)

MAX_HISTORY = 10

TASK_REC = "rec"
TASK_ITEM2ID = "item2id"
TASK_ID2ITEM = "id2item"


@dataclass(frozen=True)
class PromptPair:
    instruction: tuple[int, ...]
    response: tuple[int, ...]
    task: str


class PromptBuilder:
    """Renders prompts against one token vocabulary."""

    def __init__(self, vocab: TokenVocabulary) -> None:
        self.vocab = vocab
        self._eor = vocab.id(EOR)
        self._sep = vocab.id(SEP)

    def rec_prompt(
        self,
        history: Sequence[Identifier],
        template_id: int | None = None,
        target: Identifier | None = None,
        rng: np.random.Generator | None = None,
    ) -> PromptPair:
        """Recommendation prompt from a history of identifiers.

        ``template_id`` is 1-based; when unset one of the 15 templates is
        drawn uniformly from ``rng``.
        """
        if not 1 <= len(history) <= MAX_HISTORY:
            raise ValueError(f"history length must be in [1, {MAX_HISTORY}]")
        if template_id is None:
            if rng is None:
                raise ValueError("template_id unset requires an rng")
            template_id = int(rng.integers(1, N_TEMPLATES + 1))
        if not 1 <= template_id <= N_TEMPLATES:
            raise ValueError(f"template_id must be in [1, {N_TEMPLATES}]")
        instruction = [self.vocab.id(template_bos(template_id))]
        for pos, ident in enumerate(history):
            if pos:
                instruction.append(self._sep)
            instruction.extend(self.vocab.encode(ident))
        instruction.append(self.vocab.id(template_eos(template_id)))
        response: tuple[int, ...] = ()
        if target is not None:
            response = tuple(self.vocab.encode(target)) + (self._eor,)
        return PromptPair(tuple(instruction), response, TASK_REC)

    def item2id_prompt(self, item: Item, identifier: Identifier | None) -> PromptPair:
        """Instruction carries the item's words; response its identifier.

        ``identifier=None`` yields an instruction-only pair, used when the
        model is asked to generate the identifier itself.
        """
        instruction = (
            [self.vocab.id(ITEM2ID_BOS)]
            + self.vocab.encode(item.text_feature)
            + [self.vocab.id(ITEM2ID_EOS)]
        )
        response: tuple[int, ...] = ()
        if identifier is not None:
            response = tuple(self.vocab.encode(identifier)) + (self._eor,)
        return PromptPair(tuple(instruction), response, TASK_ITEM2ID)

    def id2item_prompt(self, item: Item, identifier: Identifier) -> PromptPair:
        """Instruction carries the identifier; response the item's words."""
        instruction = (
            [self.vocab.id(ID2ITEM_BOS)]
            + self.vocab.encode(identifier)
            + [self.vocab.id(ID2ITEM_EOS)]
        )
        response = tuple(self.vocab.encode(item.text_feature)) + (self._eor,)
        return PromptPair(tuple(instruction), response, TASK_ID2ITEM)


def rec_training_pairs(
    cases: Iterable[SplitCase],
    id_map: IdentifierMap,
    builder: PromptBuilder,
    rng: np.random.Generator,
) -> list[PromptPair]:
    """Render (history, target) cases with templates drawn per case."""
    pairs = []
    for case in cases:
        history = [id_map[item_id] for item_id in case.history]
        pairs.append(builder.rec_prompt(history, target=id_map[case.target], rng=rng))
    return pairs


def alignment_training_pairs(
    catalog: Catalog,
    id_map: IdentifierMap,
    builder: PromptBuilder,
    rng: np.random.Generator,
    mix: str = "both",
) -> list[PromptPair]:
    """Item->identifier and identifier->item pairs, shuffled 1:1 by default."""
    if mix not in ("both", "item2id", "id2item"):
        raise ValueError(f"unknown alignment mix {mix!r}")
    pairs: list[PromptPair] = []
    for item_id in sorted(catalog.items):
        item = catalog.items[item_id]
        ident = id_map[item_id]
        if mix in ("both", "item2id"):
            pairs.append(builder.item2id_prompt(item, ident))
        if mix in ("both", "id2item"):
            pairs.append(builder.id2item_prompt(item, ident))
    order = rng.permutation(len(pairs))
    return [pairs[i] for i in order]
