"""Data model, interaction ingestion, synthetic catalogs, and leave-one-out splits.

Interaction files are UTF-8 TSV, one record per line::

    user_id<TAB>item_id,item_id,...

with a companion item file::

    item_id<TAB>word word word

A dataset directory holds both as ``interactions.tsv`` and ``items.tsv``.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

log = logging.getLogger(__name__)

MIN_INTERACTIONS = 5  # users/items below this are filtered out on load
HISTORY_CAP = 10
WORD_VOCAB_SIZE = 200


class ParseError(ValueError):
    """A malformed record, reported with its file and line number."""


class IntegrityError(ValueError):
    """A record referencing an unknown item."""


@dataclass(frozen=True)
class Item:
    item_id: int
    text_feature: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.item_id < 0:
            raise ValueError("item_id must be >= 0")
        if not self.text_feature:
            raise ValueError("text_feature must be non-empty")


@dataclass(frozen=True)
class InteractionSequence:
    user_id: int
    items: tuple[int, ...]


@dataclass
class Catalog:
    items: dict[int, Item]
    users: set[int]

    def __len__(self) -> int:
        return len(self.items)

    def item_order(self) -> list[int]:
        return sorted(self.items)


class SplitCase(NamedTuple):
    user_id: int
    history: tuple[int, ...]
    target: int


@dataclass
class SplitDataset:
    train: list[SplitCase]
    valid: list[SplitCase]
    test: list[SplitCase]
    skipped: int = 0


@dataclass
class SyntheticData:
    catalog: Catalog
    sequences: list[InteractionSequence]
    clusters: dict[int, int]  # planted cluster per item, for diagnostics/tests


def _read_items_file(path: Path) -> dict[int, Item]:
    items: dict[int, Item] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not raw.strip():
            continue
        fields = raw.rstrip("\n").split("\t")
        if len(fields) != 2:
            raise ParseError(f"{path}:{lineno}: expected 'item_id<TAB>words'")
        try:
            item_id = int(fields[0])
        except ValueError:
            raise ParseError(f"{path}:{lineno}: bad item id {fields[0]!r}") from None
        words = tuple(fields[1].split())
        if not words:
            raise ParseError(f"{path}:{lineno}: item {item_id} has no text feature")
        if item_id in items:
            raise ParseError(f"{path}:{lineno}: duplicate item {item_id}")
        items[item_id] = Item(item_id=item_id, text_feature=words)
    return items


def _read_interactions_file(path: Path, known_items: dict[int, Item]) -> dict[int, list[int]]:
    sequences: dict[int, list[int]] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not raw.strip():
            continue
        fields = raw.rstrip("\n").split("\t")
        # tolerate one trailing empty field (trailing tab)
        if len(fields) == 3 and fields[2] == "":
            fields = fields[:2]
        if len(fields) != 2:
            raise ParseError(f"{path}:{lineno}: expected 'user_id<TAB>item,item,...'")
        try:
            user_id = int(fields[0])
            item_ids = [int(tok) for tok in fields[1].split(",") if tok != ""]
        except ValueError:
            raise ParseError(f"{path}:{lineno}: bad integer field") from None
        if user_id in sequences:
            raise ParseError(f"{path}:{lineno}: duplicate user {user_id}")
        for item_id in item_ids:
            if item_id not in known_items:
                raise IntegrityError(
                    f"{path}:{lineno}: user {user_id} references unknown item {item_id}"
                )
        sequences[user_id] = item_ids
    return sequences


def _filter_min_interactions(sequences: dict[int, list[int]]) -> dict[int, list[int]]:
    """Iteratively drop items and users with fewer than MIN_INTERACTIONS events."""
    seqs = {u: list(items) for u, items in sequences.items()}
    changed = True
    while changed:
        changed = False
        counts: Counter[int] = Counter(i for items in seqs.values() for i in items)
        cold_items = {i for i, c in counts.items() if c < MIN_INTERACTIONS}
        if cold_items:
            changed = True
            seqs = {u: [i for i in items if i not in cold_items] for u, items in seqs.items()}
        cold_users = [u for u, items in seqs.items() if len(items) < MIN_INTERACTIONS]
        if cold_users:
            changed = True
            for u in cold_users:
                del seqs[u]
    return seqs


def load_interactions(path: str | Path) -> tuple[Catalog, list[InteractionSequence]]:
    """Load and preprocess a dataset directory (or an interactions file).

    ``path`` may be a directory holding ``interactions.tsv``/``items.tsv``,
    or the interactions file itself with ``items.tsv`` as a sibling.
    Users and items with fewer than five interactions are removed
    iteratively until the remainder is stable.
    """
    path = Path(path)
    if path.is_dir():
        inter_path = path / "interactions.tsv"
        items_path = path / "items.tsv"
    else:
        inter_path = path
        items_path = path.parent / "items.tsv"
    if not inter_path.exists():
        raise FileNotFoundError(f"no interactions file at {inter_path}")
    if not items_path.exists():
        raise FileNotFoundError(f"no item file at {items_path}")

    all_items = _read_items_file(items_path)
    raw_sequences = _read_interactions_file(inter_path, all_items)
    kept = _filter_min_interactions(raw_sequences)

    surviving = {i for items in kept.values() for i in items}
    catalog = Catalog(
        items={i: all_items[i] for i in sorted(surviving)},
        users=set(kept),
    )
    sequences = [InteractionSequence(user_id=u, items=tuple(items)) for u, items in kept.items()]
    dropped_users = len(raw_sequences) - len(kept)
    dropped_items = len(all_items) - len(surviving)
    if dropped_users or dropped_items:
        log.info(
            "preprocessing dropped %d users and %d items below %d interactions",
            dropped_users,
            dropped_items,
            MIN_INTERACTIONS,
        )
    return catalog, sequences


def save_dataset(
    catalog: Catalog, sequences: Sequence[InteractionSequence], directory: str | Path
) -> None:
    """Serialize a dataset in the standard on-disk layout."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    item_lines = [
        f"{item_id}\t{' '.join(catalog.items[item_id].text_feature)}"
        for item_id in sorted(catalog.items)
    ]
    (directory / "items.tsv").write_text("\n".join(item_lines) + "\n", encoding="utf-8")
    inter_lines = [f"{seq.user_id}\t{','.join(str(i) for i in seq.items)}" for seq in sequences]
    (directory / "interactions.tsv").write_text("\n".join(inter_lines) + "\n", encoding="utf-8")


def synthesize_dataset(
    seed: int,
    n_users: int = 500,
    n_items: int = 100,
    n_clusters: int = 10,
    seq_len_range: tuple[int, int] = (6, 12),
) -> SyntheticData:
    """Generate a seeded catalog with planted co-occurrence structure.

    Items are partitioned into latent clusters; items in one cluster draw
    their text from one word pool, and each user's sequence stays inside
    one or two "home" clusters 90% of the time.  The output is a pure
    function of the arguments.
    """
    if n_users < 1 or n_items < 1:
        raise ValueError("n_users and n_items must be positive")
    if not 1 <= n_clusters <= n_items:
        raise ValueError("need 1 <= n_clusters <= n_items")
    lo, hi = seq_len_range
    if lo < 1 or hi < lo:
        raise ValueError(f"bad sequence length range {seq_len_range}")
    pool_size = WORD_VOCAB_SIZE // n_clusters
    if pool_size < 3:
        raise ValueError("too many clusters for the word vocabulary")

    rng = np.random.default_rng(seed)
    words = [f"w{i:03d}" for i in range(WORD_VOCAB_SIZE)]
    permuted = rng.permutation(WORD_VOCAB_SIZE)
    pools = [
        [words[permuted[c * pool_size + j]] for j in range(pool_size)] for c in range(n_clusters)
    ]

    clusters = {i: i * n_clusters // n_items for i in range(n_items)}
    cluster_items: list[list[int]] = [[] for _ in range(n_clusters)]
    for item_id, c in clusters.items():
        cluster_items[c].append(item_id)

    items: dict[int, Item] = {}
    max_words = min(6, pool_size)
    for item_id in range(n_items):
        pool = pools[clusters[item_id]]
        n_words = int(rng.integers(3, max_words + 1))
        chosen = rng.choice(len(pool), size=n_words, replace=False)
        items[item_id] = Item(item_id=item_id, text_feature=tuple(pool[j] for j in chosen))

    sequences: list[InteractionSequence] = []
    n_home = 1 if n_clusters == 1 else 2
    for user_id in range(n_users):
        home = rng.choice(n_clusters, size=n_home, replace=False)
        length = int(rng.integers(lo, hi + 1))
        seq = []
        for _ in range(length):
            if rng.random() < 0.9:
                c = int(home[int(rng.integers(n_home))])
                members = cluster_items[c]
                seq.append(members[int(rng.integers(len(members)))])
            else:
                seq.append(int(rng.integers(n_items)))
        sequences.append(InteractionSequence(user_id=user_id, items=tuple(seq)))

    catalog = Catalog(items=items, users=set(range(n_users)))
    return SyntheticData(catalog=catalog, sequences=sequences, clusters=clusters)


def leave_one_out_split(
    sequences: Iterable[InteractionSequence], history_cap: int = HISTORY_CAP
) -> SplitDataset:
    """Split sequences: last item -> test, second-to-last -> valid, earlier prefixes -> train.

    Histories are truncated to the ``history_cap`` most recent items.
    Training pairs only use targets strictly before the validation
    position, so neither held-out target leaks into training.  Sequences
    shorter than 3 are skipped (counted, with a warning).
    """
    train: list[SplitCase] = []
    valid: list[SplitCase] = []
    test: list[SplitCase] = []
    skipped = 0
    for seq in sequences:
        items = seq.items
        if len(items) < 3:
            skipped += 1
            continue
        test.append(SplitCase(seq.user_id, tuple(items[:-1][-history_cap:]), items[-1]))
        valid.append(SplitCase(seq.user_id, tuple(items[:-2][-history_cap:]), items[-2]))
        for t in range(1, len(items) - 2):
            train.append(SplitCase(seq.user_id, tuple(items[:t][-history_cap:]), items[t]))
    if skipped:
        log.warning("leave-one-out split skipped %d sequences shorter than 3", skipped)
    return SplitDataset(train=train, valid=valid, test=test, skipped=skipped)
