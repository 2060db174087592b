"""Entity recognition against a fixed lexicon and triplet-store lookup.

The triplet store holds ⟨head, relation, tail⟩ records indexed by head
entity. Recognized entities from retrieved reports query the store; the
resulting triplet list is linearized into a single token sequence for the
triplet-knowledge encoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .tokenizer import Tokenizer, normalize_words


@dataclass(frozen=True)
class Triplet:
    head: str
    relation: str
    tail: str

    def __post_init__(self):
        for part in (self.head, self.relation, self.tail):
            if not part or part != " ".join(normalize_words(part)):
                raise ValueError(f"triplet fields must be normalized lowercase text: {self!r}")

    def words(self) -> list[str]:
        return self.head.split() + self.relation.split() + self.tail.split()


@dataclass
class TripletStore:
    triplets: list[Triplet] = field(default_factory=list)
    head_index: dict[str, list[int]] = field(default_factory=dict)

    @classmethod
    def from_triplets(cls, triplets: list[Triplet]) -> "TripletStore":
        store = cls(triplets=list(triplets))
        for pos, t in enumerate(store.triplets):
            store.head_index.setdefault(t.head, []).append(pos)
        return store

    @classmethod
    def load(cls, path: str | Path) -> "TripletStore":
        triplets = []
        for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected head<TAB>relation<TAB>tail")
            triplets.append(Triplet(*(" ".join(normalize_words(p)) for p in parts)))
        return cls.from_triplets(triplets)

    def save(self, path: str | Path) -> None:
        lines = [f"{t.head}\t{t.relation}\t{t.tail}" for t in self.triplets]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class EntityLexicon:
    entries: frozenset[str]

    def __post_init__(self):
        if not self.entries:
            raise ValueError("lexicon must be nonempty")
        for e in self.entries:
            if e != e.lower():
                raise ValueError(f"lexicon entries must be lowercase: {e!r}")

    @classmethod
    def from_words(cls, entries) -> "EntityLexicon":
        return cls(frozenset(" ".join(normalize_words(e)) for e in entries))

    @classmethod
    def load(cls, path: str | Path) -> "EntityLexicon":
        entries = []
        for raw in Path(path).read_text(encoding="utf-8").splitlines():
            line = raw.split("#", 1)[0].strip()
            if line:
                entries.append(line)
        return cls.from_words(entries)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(sorted(self.entries)) + "\n", encoding="utf-8")

    @property
    def max_words(self) -> int:
        return max(len(e.split()) for e in self.entries)


def extract_entities(text: str, lexicon: EntityLexicon) -> list[str]:
    """Longest-match left-to-right lexicon scan over normalized tokens.

    Returns entities in first-occurrence order, deduplicated.
    """
    words = normalize_words(text)
    found: list[str] = []
    seen: set[str] = set()
    i = 0
    max_w = lexicon.max_words
    while i < len(words):
        match = None
        for width in range(min(max_w, len(words) - i), 0, -1):
            candidate = " ".join(words[i:i + width])
            if candidate in lexicon.entries:
                match = candidate
                break
        if match is None:
            i += 1
            continue
        if match not in seen:
            found.append(match)
            seen.add(match)
        i += len(match.split())
    return found


def query_triplets(store: TripletStore, entities: list[str], cap: int) -> list[Triplet]:
    """Head-indexed lookup for each entity in order, deduplicated, capped."""
    if cap < 0:
        raise ValueError("cap must be >= 0")
    out: list[Triplet] = []
    seen: set[tuple[str, str, str]] = set()
    for entity in entities:
        for pos in store.head_index.get(entity, ()):
            t = store.triplets[pos]
            key = (t.head, t.relation, t.tail)
            if key not in seen:
                seen.add(key)
                out.append(t)
    return out[:cap]


def linearize(triplets: list[Triplet], tokenizer: Tokenizer, max_len: int = 90) -> list[int]:
    """Concatenate triplets into one [CLS]-led token sequence.

    Triplets are joined head-relation-tail with a separator token between
    consecutive triplets; the sequence is hard-truncated to `max_len`.
    """
    ids = [tokenizer.cls_id]
    for j, t in enumerate(triplets):
        if j > 0:
            ids.append(tokenizer.sep_id)
        ids.extend(tokenizer.word_ids(t.words()))
    return ids[:max_len]
