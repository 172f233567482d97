"""Identifier tokens and the versioned item -> identifier map.

An item identifier is an ordered tuple of token strings.  Tokens live in
disjoint namespaces so that identifier grammars stay prefix-decodable:

* ``<a_3>``, ``<b_0>``, ... -- depth-tagged codes (one letter per depth);
* ``<o_2>``                 -- within-leaf ordinal tokens;
* ``<x_7>``                 -- disambiguation tokens appended by collision
                               avoidance.

The letters ``o`` and ``x`` are reserved, so depth letters skip them.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

DEPTH_LETTERS = "abcdefghijklmnpqrstuvwyz"  # excludes reserved 'o' and 'x'

Identifier = tuple[str, ...]

_TOKEN_RE = re.compile(r"<([a-z])_(\d+)>")


def level_token(depth: int, code: int) -> str:
    """Token naming code ``code`` at tree/codebook depth ``depth``."""
    if not 0 <= depth < len(DEPTH_LETTERS):
        raise ValueError(f"depth {depth} outside supported range")
    if code < 0:
        raise ValueError("code must be non-negative")
    return f"<{DEPTH_LETTERS[depth]}_{code}>"


def ordinal_token(rank: int) -> str:
    return f"<o_{rank}>"


def disambig_token(index: int) -> str:
    return f"<x_{index}>"


def token_namespace(token: str) -> tuple:
    """Classify an identifier token.

    Returns ``("level", depth)`` for depth-tagged codes, ``("ordinal",)``
    for ordinal tokens and ``("disambig",)`` for disambiguation tokens.
    Raises ``ValueError`` for anything else (words, control tokens).
    """
    match = _TOKEN_RE.fullmatch(token)
    if match is None:
        raise ValueError(f"not an identifier token: {token!r}")
    letter = match.group(1)
    if letter == "o":
        return ("ordinal",)
    if letter == "x":
        return ("disambig",)
    idx = DEPTH_LETTERS.find(letter)
    if idx < 0:
        raise ValueError(f"not an identifier token: {token!r}")
    return ("level", idx)


def is_identifier_token(token: str) -> bool:
    try:
        token_namespace(token)
    except ValueError:
        return False
    return True


@dataclass
class IdentifierMap:
    """Total mapping item_id -> identifier, versioned per refinement round."""

    entries: dict[int, Identifier] = field(default_factory=dict)
    version: int = 0
    source: str = "unknown"

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, item_id: int) -> Identifier:
        return self.entries[item_id]

    def __contains__(self, item_id: int) -> bool:
        return item_id in self.entries

    def items(self):
        return self.entries.items()

    def token_set(self) -> set[str]:
        return {tok for ident in self.entries.values() for tok in ident}

    def is_injective(self) -> bool:
        return len(set(self.entries.values())) == len(self.entries)

    def colliding_groups(self) -> list[list[int]]:
        """Groups of item ids sharing one identifier, each sorted, deterministic order."""
        by_ident: dict[Identifier, list[int]] = {}
        for item_id in sorted(self.entries):
            by_ident.setdefault(self.entries[item_id], []).append(item_id)
        return [group for _, group in sorted(by_ident.items()) if len(group) > 1]

    def save(self, path: str | Path, config_hash: str | None = None) -> None:
        lines = [
            "# identifier-map v1",
            f"# version: {self.version}",
            f"# source: {self.source}",
            f"# config: {config_hash or '-'}",
        ]
        for item_id in sorted(self.entries):
            lines.append(f"{item_id}\t{' '.join(self.entries[item_id])}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> tuple["IdentifierMap", str | None]:
        """Read a map file; returns the map and the stored config hash (or None)."""
        version = 0
        source = "unknown"
        config_hash: str | None = None
        entries: dict[int, Identifier] = {}
        for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("version:"):
                    version = int(body.split(":", 1)[1])
                elif body.startswith("source:"):
                    source = body.split(":", 1)[1].strip()
                elif body.startswith("config:"):
                    value = body.split(":", 1)[1].strip()
                    config_hash = None if value == "-" else value
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'item<TAB>tokens'")
            item_id = int(fields[0])
            if item_id in entries:
                raise ValueError(f"{path}:{lineno}: duplicate item {item_id}")
            entries[item_id] = tuple(fields[1].split())
        return cls(entries=entries, version=version, source=source), config_hash
