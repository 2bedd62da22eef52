"""Synthetic paired images, reports and ground truth.

Entities are bundles of visual attributes (brightness, size, texture, and
optionally edge profile).  Each entity's knowledge-base description lists
exactly its attribute words, so description embeddings carry the visual
structure that makes description-based zero-shot queries possible.
Findings are rendered as blobs inside named position cells; reports are
emitted from the grammar templates over the provenance triplets.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from itertools import product

import numpy as np

from .knowledge import OTHER, UNSPECIFIED, KnowledgeBase
from .reports import (ExistLabel, Report, ReportGrammar, Triplet, emit_absent_pair,
                      emit_sentence)

# Render parameters per attribute word.  Radii are in units of the slot size.
BRIGHTNESS = {"bright": 1.0, "medium": 0.75, "faint": 0.5}
SIZE = {"large": 0.875, "medium": 0.72, "small": 0.6}
TEXTURES = ("smooth", "striped", "checkered")
EDGES = ("sharp", "soft", "hazy")
LOW_STRIPE = 0.35


@dataclass(frozen=True)
class EntityDef:
    name: str
    attributes: tuple[str, ...]     # one word per attribute dimension, in dimension order


def describe_attributes(words) -> str:
    words = list(words)
    if len(words) == 1:
        return f"It appears {words[0]}."
    return "It appears " + ", ".join(words[:-1]) + f" and {words[-1]}."


DESK_ENTITIES = (
    EntityDef("mass", ("bright", "large", "smooth")),
    EntityDef("consolidation", ("bright", "large", "striped")),
    EntityDef("nodule", ("bright", "small", "smooth")),
    EntityDef("opacity", ("faint", "large", "striped")),
    EntityDef("cyst", ("faint", "small", "smooth")),
    EntityDef("collapse", ("faint", "small", "striped")),
    EntityDef("granuloma", ("bright", "small", "striped")),
)
DESK_POSITIONS = ("right apex", "left apex", "right lower lobe", "left lower lobe")


@dataclass
class WorldSpec:
    """Generative parameters of the synthetic world (desk defaults)."""
    canvas: int = 32
    channels: int = 1
    grid: tuple[int, int] = (2, 2)
    position_names: tuple[str, ...] = DESK_POSITIONS
    slot: int = 8
    center_offset: float = 3.0
    jitter: float = 0.25
    dimensions: tuple[str, ...] = ("brightness", "size", "texture")
    entities: tuple[EntityDef, ...] = DESK_ENTITIES
    unseen: tuple[str, ...] = ("granuloma",)
    prevalence: float = 0.25
    unseen_prevalence: float = 0.1
    uncertain_rate: float = 0.05
    uncertain_render_prob: float = 0.5
    absent_mention_rate: float = 0.7
    position_mention_rate: float = 0.85
    absent_position_rate: float = 0.25
    pair_rate: float = 0.3
    max_filler: int = 2
    noise: float = 0.05

    def __post_init__(self):
        self.grid = tuple(self.grid)
        self.position_names = tuple(self.position_names)
        self.dimensions = tuple(self.dimensions)
        self.unseen = tuple(self.unseen)
        self.entities = tuple(e if isinstance(e, EntityDef) else
                              EntityDef(e["name"], tuple(e["attributes"])) for e in self.entities)

    def validate(self) -> None:
        rows, cols = self.grid
        if not self.entities:
            raise ValueError("world needs at least one entity")
        if rows * cols != len(self.position_names):
            raise ValueError("one name per position cell is required")
        if self.canvas % rows or self.canvas % cols:
            raise ValueError("position cells must tile the canvas exactly (no overlap)")
        ch, cw = self.canvas // rows, self.canvas // cols
        if ch % self.slot or cw % self.slot:
            raise ValueError("slot size must tile each position cell")
        if len(set(self.position_names)) != len(self.position_names) or \
                {UNSPECIFIED, OTHER} & set(self.position_names):
            raise ValueError("position names must be distinct and not reserved")
        names = [e.name for e in self.entities]
        if len(set(names)) != len(names):
            raise ValueError("entity names must be unique")
        if not set(self.unseen) <= set(names):
            raise ValueError("unseen entities must be defined")
        if len(self.unseen) >= len(names):
            raise ValueError("at least one entity must be seen")
        known = {"brightness": BRIGHTNESS, "size": SIZE, "texture": TEXTURES, "edge": EDGES}
        for dim in self.dimensions:
            if dim not in known:
                raise ValueError(f"unknown attribute dimension {dim!r}")
        for e in self.entities:
            if len(e.attributes) != len(self.dimensions):
                raise ValueError(f"entity {e.name!r} needs one attribute per dimension")
            for dim, word in zip(self.dimensions, e.attributes):
                if word not in known[dim]:
                    raise ValueError(f"{word!r} is not a {dim} value")
        combos = [e.attributes for e in self.entities]
        if len(set(combos)) != len(combos):
            raise ValueError("entities must have distinct attribute bundles")
        for rate in (self.prevalence, self.unseen_prevalence, self.uncertain_rate,
                     self.absent_mention_rate, self.position_mention_rate):
            if not 0 <= rate <= 1:
                raise ValueError("rates must lie in [0, 1]")
        if self.prevalence + self.uncertain_rate > 1:
            raise ValueError("prevalence + uncertain_rate must not exceed 1")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")

    @property
    def entity_names(self) -> tuple[str, ...]:
        return tuple(e.name for e in self.entities)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "WorldSpec":
        return cls(**data)

    def spec_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def knowledge_base(self) -> KnowledgeBase:
        names = self.entity_names
        seen = tuple(i for i, n in enumerate(names) if n not in self.unseen)
        return KnowledgeBase(names, tuple(describe_attributes(e.attributes) for e in self.entities),
                             self.position_names + (OTHER, UNSPECIFIED), seen)

    def cell_box(self, position: int) -> tuple[int, int, int, int]:
        rows, cols = self.grid
        ch, cw = self.canvas // rows, self.canvas // cols
        r, c = divmod(position, cols)
        return r * ch, c * cw, ch, cw


def paper_world() -> WorldSpec:
    """75 seen + 1 unseen entities over a 7x7 position grid (49 cells + other + unspecified)."""
    combos = list(product(("bright", "medium", "faint"), ("large", "medium", "small"),
                          TEXTURES, EDGES))
    ents = tuple(EntityDef(f"finding {i + 1}", c) for i, c in enumerate(combos[:76]))
    names = [f"zone r{r + 1} c{c + 1}" for r in range(7) for c in range(7)]
    return WorldSpec(canvas=224, channels=3, grid=(7, 7), position_names=tuple(names), slot=16,
                     center_offset=6.0, jitter=0.5,
                     dimensions=("brightness", "size", "texture", "edge"), entities=ents,
                     unseen=(ents[-1].name,), prevalence=0.03, unseen_prevalence=0.05)


@dataclass
class Sample:
    index: int
    image: np.ndarray                       # (H, W, C) in [0, 1], 8-bit quantized
    report: Report
    labels: np.ndarray                      # (num_entities,) visual presence 0/1
    masks: dict[int, np.ndarray] = field(default_factory=dict)   # entity -> (H, W) bool
    triplets: list[Triplet] = field(default_factory=list)
    has_unseen: bool = False


def _render_blob(spec: WorldSpec, attrs: dict, cy: float, cx: float, contrast: float):
    n = spec.canvas
    yy, xx = np.mgrid[0:n, 0:n].astype(float)
    radius = SIZE[attrs.get("size", "large")] * spec.slot
    dist2 = (yy - cy) ** 2 + (xx - cx) ** 2
    support = dist2 <= radius ** 2
    value = np.full((n, n), BRIGHTNESS[attrs.get("brightness", "bright")] * contrast)
    texture = attrs.get("texture", "smooth")
    if texture == "striped":
        value *= np.where((yy // 2) % 2 == 0, 1.0, LOW_STRIPE)
    elif texture == "checkered":
        value *= np.where((yy // 2 + xx // 2) % 2 == 0, 1.0, LOW_STRIPE)
    edge = attrs.get("edge", "sharp")
    if edge == "soft":
        value *= 1.0 - 0.6 * dist2 / radius ** 2
    elif edge == "hazy":
        value *= 1.0 - 0.8 * np.sqrt(dist2) / radius
    return np.where(support, value, 0.0), support


def _place(spec: WorldSpec, rng, occupied: dict[int, set]) -> tuple[int, float, float]:
    npos = len(spec.position_names)
    free_cells = [p for p in range(npos) if not occupied.get(p)]
    top, left, ch, cw = 0, 0, 0, 0
    while True:
        if free_cells:
            pos = int(free_cells[rng.integers(len(free_cells))])
        else:
            pos = int(rng.integers(npos))
        top, left, ch, cw = spec.cell_box(pos)
        slots = [(r, c) for r in range(ch // spec.slot) for c in range(cw // spec.slot)
                 if (r, c) not in occupied.setdefault(pos, set())]
        if slots:
            break
        free_cells = []
    r, c = slots[rng.integers(len(slots))]
    occupied[pos].add((r, c))
    cy = top + r * spec.slot + spec.center_offset + rng.uniform(-spec.jitter, spec.jitter)
    cx = left + c * spec.slot + spec.center_offset + rng.uniform(-spec.jitter, spec.jitter)
    return pos, cy, cx


def generate_sample(spec: WorldSpec, index: int, seed: int, kb: KnowledgeBase,
                    grammar: ReportGrammar) -> Sample:
    rng = np.random.default_rng([seed, index])
    n_ent = len(spec.entities)
    unseen = set(kb.unseen)
    dims = spec.dimensions
    n_pos = len(spec.position_names)
    canvas = np.zeros((spec.canvas, spec.canvas))
    labels = np.zeros(n_ent, dtype=np.int64)
    masks: dict[int, np.ndarray] = {}
    occupied: dict[int, set] = {}
    triplets: list[Triplet] = []
    absent_bare: list[int] = []
    has_unseen = False

    for e, ent in enumerate(spec.entities):
        u = rng.random()
        if e in unseen:
            state = ExistLabel.PRESENT if u < spec.unseen_prevalence else None
        elif u < spec.prevalence:
            state = ExistLabel.PRESENT
        elif u < spec.prevalence + spec.uncertain_rate:
            state = ExistLabel.UNCERTAIN
        else:
            state = ExistLabel.ABSENT
        attrs = dict(zip(dims, ent.attributes))
        if state is ExistLabel.PRESENT or (state is ExistLabel.UNCERTAIN
                                           and rng.random() < spec.uncertain_render_prob):
            contrast = 1.0 if state is ExistLabel.PRESENT else 0.5
            pos, cy, cx = _place(spec, rng, occupied)
            value, support = _render_blob(spec, attrs, cy, cx, contrast)
            canvas = np.maximum(canvas, value)
            masks[e] = support
            labels[e] = 1
        elif state is ExistLabel.UNCERTAIN:
            pos = int(rng.integers(n_pos))
        if state is None:
            continue
        has_unseen |= e in unseen
        if state is ExistLabel.ABSENT:
            if rng.random() >= spec.absent_mention_rate:
                continue
            if rng.random() < spec.absent_position_rate:
                triplets.append(Triplet(e, int(rng.integers(n_pos)), state))
            else:
                absent_bare.append(e)
            continue
        where = pos if rng.random() < spec.position_mention_rate else kb.unspecified_id
        triplets.append(Triplet(e, where, state))

    sentences = [emit_sentence(t, grammar, int(rng.integers(8))) for t in triplets]
    rng.shuffle(absent_bare)
    i = 0
    while i < len(absent_bare):
        if i + 1 < len(absent_bare) and rng.random() < spec.pair_rate:
            sentences.append(emit_absent_pair(absent_bare[i], absent_bare[i + 1], grammar,
                                              int(rng.integers(8))))
            i += 2
        else:
            sentences.append(emit_sentence(Triplet(absent_bare[i], kb.unspecified_id,
                                                   ExistLabel.ABSENT), grammar, int(rng.integers(8))))
            i += 1
    triplets += [Triplet(e, kb.unspecified_id, ExistLabel.ABSENT) for e in absent_bare]
    fillers = grammar.templates["filler"]
    for _ in range(int(rng.integers(spec.max_filler + 1))):
        sentences.append(fillers[int(rng.integers(len(fillers)))])
    order = rng.permutation(len(sentences))
    report = Report([sentences[k] for k in order])

    if spec.noise:
        canvas = canvas + spec.noise * rng.standard_normal(canvas.shape)
    canvas = np.round(np.clip(canvas, 0.0, 1.0) * 255.0) / 255.0
    image = np.repeat(canvas[:, :, None], spec.channels, axis=2)
    triplets.sort(key=lambda t: (t.entity, t.position))
    return Sample(index, image, report, labels, masks, triplets, has_unseen)


def generate_dataset(spec: WorldSpec, n: int, seed: int, kb: KnowledgeBase | None = None,
                     grammar: ReportGrammar | None = None) -> list[Sample]:
    """``n`` samples, each drawn from its own stream keyed by ``(seed, index)``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    spec.validate()
    kb = kb or spec.knowledge_base()
    grammar = grammar or ReportGrammar.for_knowledge_base(kb)
    return [generate_sample(spec, i, seed, kb, grammar) for i in range(n)]


def split_sizes(n: int, fractions) -> list[int]:
    fractions = np.asarray(fractions, dtype=float)
    if np.any(fractions < 0) or not np.isclose(fractions.sum(), 1.0):
        raise ValueError("split fractions must be non-negative and sum to 1")
    raw = fractions * n
    sizes = np.floor(raw).astype(int)
    for k in np.argsort(-(raw - sizes), kind="stable")[: n - sizes.sum()]:
        sizes[k] += 1
    return sizes.tolist()


def split(dataset: list[Sample], fractions=(0.6, 0.2, 0.2), seed: int = 0):
    """Deterministic disjoint (train, val, test) partition.

    Samples that show or mention an unseen entity always land in the last
    (test) part, so no unseen entity leaks into training or validation.
    """
    sizes = split_sizes(len(dataset), fractions)
    perm = np.random.default_rng([seed, 7]).permutation(len(dataset))
    restricted = [int(i) for i in perm if dataset[i].has_unseen]
    free = [int(i) for i in perm if not dataset[i].has_unseen]
    if len(restricted) > sizes[-1]:
        raise ValueError(f"{len(restricted)} samples carry unseen entities but the test split "
                         f"holds only {sizes[-1]}")
    parts, start = [], 0
    for size in sizes[:-1]:
        parts.append(free[start:start + size])
        start += size
    parts.append(restricted + free[start:])
    return tuple([dataset[i] for i in sorted(p)] for p in parts)
