"""Entity descriptions, position prompts, and the frozen text embedder.

Entity names are translated into attribute-word descriptions before they
are embedded, and positions are embedded through the fixed prompt
``"It is located at {position}"``.  The embedder is a deterministic stand-in
for a frozen pretrained text encoder: every token maps to a unit vector
drawn from a generator seeded by a hash of ``(seed, token)``, and a text
embeds to the mean of its token vectors.  Texts that share attribute words
therefore share components of their embeddings.
"""
from __future__ import annotations

import configparser
import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

KB_FORMAT = "entalign-kb/1"
POSITION_PROMPT = "It is located at {position}"
UNSPECIFIED = "unspecified"
OTHER = "other"

_TOKEN = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase, then split on whitespace and punctuation."""
    return _TOKEN.findall(text.lower())


@dataclass(frozen=True)
class KnowledgeBase:
    """Entity names with descriptions, the position vocabulary, and the seen split.

    ``seen`` lists entity ids (in order) that form the training query set.
    ``positions`` must contain ``unspecified`` and ``other``.
    """
    names: tuple[str, ...]
    descriptions: tuple[str, ...]
    positions: tuple[str, ...]
    seen: tuple[int, ...]

    def __post_init__(self):
        if len(self.names) != len(self.descriptions):
            raise ValueError("every entity needs exactly one description")
        if len(set(self.names)) != len(self.names):
            raise ValueError("entity names must be unique")
        for name, desc in zip(self.names, self.descriptions):
            if not tokenize(desc):
                raise ValueError(f"entity {name!r} has an empty description")
        if len(set(self.positions)) != len(self.positions):
            raise ValueError("position names must be unique")
        for required in (UNSPECIFIED, OTHER):
            if required not in self.positions:
                raise ValueError(f"position vocabulary must contain {required!r}")
        if len(set(self.seen)) != len(self.seen) or any(not 0 <= i < len(self.names) for i in self.seen):
            raise ValueError("seen ids must be distinct, valid entity ids")
        if not self.seen:
            raise ValueError("at least one entity must be seen")

    @property
    def num_queries(self) -> int:
        return len(self.seen)

    @property
    def num_positions(self) -> int:
        return len(self.positions)

    @property
    def unseen(self) -> tuple[int, ...]:
        s = set(self.seen)
        return tuple(i for i in range(len(self.names)) if i not in s)

    @property
    def unspecified_id(self) -> int:
        return self.positions.index(UNSPECIFIED)

    def entity_id(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown entity {name!r}") from None

    def position_id(self, name: str) -> int:
        try:
            return self.positions.index(name)
        except ValueError:
            raise KeyError(f"unknown position {name!r}") from None

    def query_index(self, entity: int) -> int:
        """Row of ``entity`` in the query matrix; KeyError for unseen entities."""
        try:
            return self.seen.index(entity)
        except ValueError:
            raise KeyError(f"entity {entity} is not in the query set") from None

    # -- persistence -----------------------------------------------------------
    def dumps(self) -> str:
        lines = ["[format]", f"tag = {KB_FORMAT}", "", "[entities]"]
        lines += [f"{n} = {d}" for n, d in zip(self.names, self.descriptions)]
        lines += ["", "[positions]", "names = " + " | ".join(self.positions), "",
                  "[seen]", "entities = " + " | ".join(self.names[i] for i in self.seen), ""]
        return "\n".join(lines)

    @classmethod
    def loads(cls, text: str) -> "KnowledgeBase":
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp.read_string(text)
        tag = cp.get("format", "tag", fallback=None)
        if tag != KB_FORMAT:
            raise ValueError(f"unsupported knowledge-base format {tag!r}")
        names = tuple(cp["entities"].keys())
        descs = tuple(cp["entities"].values())
        positions = tuple(p.strip() for p in cp["positions"]["names"].split("|"))
        seen_names = [s.strip() for s in cp["seen"]["entities"].split("|") if s.strip()]
        seen = tuple(names.index(s) for s in seen_names)
        return cls(names, descs, positions, seen)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "KnowledgeBase":
        return cls.loads(Path(path).read_text())


@dataclass
class TextEmbedder:
    """Mean-pooled hashed token vectors of dimension ``dim``."""
    dim: int = 64
    seed: int = 0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def token_vector(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            digest = hashlib.blake2b(f"{self.seed}\x00{token}".encode(), digest_size=16).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            vec = rng.standard_normal(self.dim)
            vec /= np.linalg.norm(vec)
            vec.setflags(write=False)
            self._cache[token] = vec
        return vec

    def embed(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        if not tokens:
            raise ValueError("cannot embed text without tokens")
        return np.mean([self.token_vector(t) for t in tokens], axis=0)


def describe(entity: int | str, kb: KnowledgeBase) -> str:
    """KB description for an entity id; a raw string passes through unchanged."""
    if isinstance(entity, str):
        if not entity.strip():
            raise ValueError("empty description")
        return entity
    if not 0 <= int(entity) < len(kb.names):
        raise KeyError(f"unknown entity id {entity}")
    return kb.descriptions[int(entity)]


def embed_entity(entity: int | str, kb: KnowledgeBase, embedder: TextEmbedder,
                 translate: bool = True) -> np.ndarray:
    """Embedding of an entity's description (or of its bare name when ``translate`` is off)."""
    if not translate and not isinstance(entity, str):
        if not 0 <= int(entity) < len(kb.names):
            raise KeyError(f"unknown entity id {entity}")
        return embedder.embed(kb.names[int(entity)].replace("_", " "))
    return embedder.embed(describe(entity, kb))


def position_prompt(name: str) -> str:
    return POSITION_PROMPT.format(position=name.replace("_", " "))


def embed_position(position: int, kb: KnowledgeBase, embedder: TextEmbedder) -> np.ndarray:
    if not 0 <= int(position) < kb.num_positions:
        raise KeyError(f"unknown position id {position}")
    return embedder.embed(position_prompt(kb.positions[int(position)]))


def build_query_embeddings(kb: KnowledgeBase, embedder: TextEmbedder,
                           translate: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Query matrix (|Q|, d') over seen entities and position bank (|P|, d')."""
    queries = np.stack([embed_entity(e, kb, embedder, translate) for e in kb.seen])
    bank = np.stack([embed_position(p, kb, embedder) for p in range(kb.num_positions)])
    return queries, bank
