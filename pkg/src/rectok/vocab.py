"""Token table shared by prompt builders, the sequence model, and decoding.

Token ids are dense and stable once issued; identifier tokens may be
appended at runtime (collision avoidance mints fresh ones).
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable

from .identifiers import is_identifier_token, token_namespace

PAD = "<pad>"
EOR = "<eor>"  # end-of-response marker, terminates every generated identifier
SEP = "<sep>"  # separates history identifiers inside recommendation prompts

N_TEMPLATES = 15

ITEM2ID_BOS = "<i2d:bos>"
ITEM2ID_EOS = "<i2d:eos>"
ID2ITEM_BOS = "<d2i:bos>"
ID2ITEM_EOS = "<d2i:eos>"


def template_bos(template_id: int) -> str:
    return f"<t{template_id}:bos>"


def template_eos(template_id: int) -> str:
    return f"<t{template_id}:eos>"


def control_tokens() -> list[str]:
    """All control tokens, in their canonical registration order."""
    tokens = [PAD, EOR, SEP, ITEM2ID_BOS, ITEM2ID_EOS, ID2ITEM_BOS, ID2ITEM_EOS]
    for j in range(1, N_TEMPLATES + 1):
        tokens.append(template_bos(j))
        tokens.append(template_eos(j))
    return tokens


class TokenVocabulary:
    """Bidirectional token <-> id table with append-only growth."""

    def __init__(self) -> None:
        self._tokens: list[str] = []
        self._ids: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def add(self, token: str) -> int:
        """Register ``token`` if new; returns its id either way."""
        existing = self._ids.get(token)
        if existing is not None:
            return existing
        token_id = len(self._tokens)
        self._tokens.append(token)
        self._ids[token] = token_id
        return token_id

    def add_new(self, token: str) -> int:
        if token in self._ids:
            raise ValueError(f"token already registered: {token!r}")
        return self.add(token)

    def id(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise KeyError(f"unknown token {token!r}") from None

    def token(self, token_id: int) -> str:
        return self._tokens[token_id]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(tok) for tok in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self._tokens[i] for i in ids]

    def tokens(self) -> tuple[str, ...]:
        return tuple(self._tokens)

    def in_namespace(self, namespace: tuple) -> list[str]:
        """Identifier tokens of the table belonging to one namespace, in id order."""
        found = []
        for tok in self._tokens:
            if not is_identifier_token(tok):
                continue
            if token_namespace(tok) == namespace:
                found.append(tok)
        return found

    def max_disambig_index(self) -> int:
        """Highest minted disambiguation-token index, or -1 when none exist."""
        best = -1
        for tok in self._tokens:
            if tok.startswith("<x_") and tok.endswith(">"):
                best = max(best, int(tok[3:-1]))
        return best

    def save(self, path: str | Path) -> None:
        lines = [f"{tok}\t{i}" for i, tok in enumerate(self._tokens)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "TokenVocabulary":
        vocab = cls()
        for raw in Path(path).read_text(encoding="utf-8").splitlines():
            if not raw.strip():
                continue
            token, token_id = raw.split("\t")
            got = vocab.add_new(token)
            if got != int(token_id):
                raise ValueError(f"non-dense vocabulary file: {token!r} -> {token_id}")
        return vocab

    @classmethod
    def from_tokens(cls, tokens: Iterable[str]) -> "TokenVocabulary":
        vocab = cls()
        for tok in tokens:
            vocab.add_new(tok)
        return vocab


def build_vocabulary(words: Iterable[str], identifier_tokens: Iterable[str]) -> TokenVocabulary:
    """Assemble the full table: control tokens, then words, then identifier tokens.

    Inputs are sorted so the table depends only on their contents.
    """
    vocab = TokenVocabulary()
    for tok in control_tokens():
        vocab.add_new(tok)
    for word in sorted(set(words)):
        if word.startswith("<"):
            raise ValueError(f"word token may not look like a control token: {word!r}")
        vocab.add_new(word)
    for tok in sorted(set(identifier_tokens)):
        if not is_identifier_token(tok):
            raise ValueError(f"not a valid identifier token: {tok!r}")
        vocab.add_new(tok)
    return vocab
