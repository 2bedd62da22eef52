"""Report sentences to ``{entity, position, exist}`` triplets.

A :class:`ReportGrammar` holds the lexicons (surface form to id), the cue
lists, and the sentence templates used to emit synthetic reports.  Parsing
is longest-match over tokens:

* an entity mention takes its exist label from the nearest cue before it in
  the same sentence (negation gives ``ABSENT``, uncertainty ``UNCERTAIN``,
  no cue ``PRESENT``);
* a position mention attaches to the nearest entity before it, or to the
  next entity when none precedes it;
* an entity with no attached position gets the ``unspecified`` position, and
  an entity with several gets one triplet per position.

Across a report, triplets for the same entity merge with precedence
``PRESENT > ABSENT > UNCERTAIN``; the merged position comes from the winning
label, lowest position id first.
"""
from __future__ import annotations

import configparser
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import NamedTuple

from .knowledge import KnowledgeBase, UNSPECIFIED, tokenize

GRAMMAR_FORMAT = "entalign-grammar/1"


class ExistLabel(IntEnum):
    """Exist token values: 1 for present, 0 for absent, -1 for uncertain."""
    PRESENT = 1
    ABSENT = 0
    UNCERTAIN = -1


PRECEDENCE = {ExistLabel.PRESENT: 2, ExistLabel.ABSENT: 1, ExistLabel.UNCERTAIN: 0}


class Triplet(NamedTuple):
    entity: int
    position: int
    exist: ExistLabel


@dataclass
class Report:
    sentences: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.sentences = [s.strip() for s in self.sentences]
        if any(not s for s in self.sentences):
            raise ValueError("report sentences must be non-empty")

    @classmethod
    def from_text(cls, text: str) -> "Report":
        parts = re.split(r"(?<=[.!?])\s+", text.strip())
        return cls([p for p in (s.strip() for s in parts) if p])

    def text(self) -> str:
        return " ".join(self.sentences)


DEFAULT_NEGATION = ("no evidence of", "no", "without")
DEFAULT_UNCERTAINTY = ("possible", "may represent", "cannot exclude")
DEFAULT_TEMPLATES = {
    "present": ("There is {entity}.", "{entity} is seen."),
    "present_pos": ("There is {entity} in the {position}.", "{entity} is seen in the {position}.",
                    "The {position} shows {entity}."),
    "absent": ("No {entity}.", "No evidence of {entity}.", "The lungs are without {entity}."),
    "absent_pos": ("No evidence of {entity} in the {position}.", "No {entity} in the {position}."),
    "absent_pair": ("No {entity} or {entity2}.",),
    "uncertain": ("Possible {entity}.", "Findings may represent {entity}.", "Cannot exclude {entity}."),
    "uncertain_pos": ("Possible {entity} in the {position}.", "Cannot exclude {entity} in the {position}."),
    "filler": ("The technique is satisfactory.", "Bony structures are intact.",
               "The study is compared with the prior exam."),
}
_CATEGORY = {ExistLabel.PRESENT: "present", ExistLabel.ABSENT: "absent",
             ExistLabel.UNCERTAIN: "uncertain"}


def _norm(phrase: str) -> tuple[str, ...]:
    return tuple(tokenize(phrase))


@dataclass
class ReportGrammar:
    entity_lexicon: dict[str, int]
    position_lexicon: dict[str, int]
    unspecified: int
    negation_cues: tuple[str, ...] = DEFAULT_NEGATION
    uncertainty_cues: tuple[str, ...] = DEFAULT_UNCERTAINTY
    templates: dict[str, tuple[str, ...]] = field(default_factory=lambda: dict(DEFAULT_TEMPLATES))

    def __post_init__(self):
        table: dict[tuple[str, ...], tuple[str, int]] = {}

        def put(phrase, kind, value):
            key = _norm(phrase)
            if not key:
                raise ValueError(f"empty surface form for {kind}")
            if key in table and table[key] != (kind, value):
                raise ValueError(f"ambiguous surface form {' '.join(key)!r}")
            table[key] = (kind, value)

        for s, i in self.entity_lexicon.items():
            put(s, "entity", int(i))
        for s, i in self.position_lexicon.items():
            if int(i) == self.unspecified:
                raise ValueError("the unspecified position has no surface form")
            put(s, "position", int(i))
        for c in self.negation_cues:
            put(c, "cue", int(ExistLabel.ABSENT))
        for c in self.uncertainty_cues:
            put(c, "cue", int(ExistLabel.UNCERTAIN))
        self._table = table
        self._maxlen = max(len(k) for k in table)
        self._entity_surface: dict[int, str] = {}
        for s, i in self.entity_lexicon.items():
            self._entity_surface.setdefault(int(i), s)
        self._position_surface: dict[int, str] = {}
        for s, i in self.position_lexicon.items():
            self._position_surface.setdefault(int(i), s)
        for cat in ("present", "present_pos", "absent", "absent_pos", "uncertain", "uncertain_pos", "filler"):
            if not self.templates.get(cat):
                raise ValueError(f"grammar needs at least one {cat!r} template")

    @classmethod
    def for_knowledge_base(cls, kb: KnowledgeBase, **kw) -> "ReportGrammar":
        entities = {n.replace("_", " "): i for i, n in enumerate(kb.names)}
        positions = {p.replace("_", " "): i for i, p in enumerate(kb.positions) if p != UNSPECIFIED}
        return cls(entities, positions, kb.unspecified_id, **kw)

    def entity_surface(self, entity: int) -> str:
        return self._entity_surface[entity]

    def position_surface(self, position: int) -> str:
        return self._position_surface[position]

    def with_lexemes(self, entities: dict[str, int] | None = None,
                     positions: dict[str, int] | None = None) -> "ReportGrammar":
        """Copy of this grammar with extra surface forms."""
        return ReportGrammar({**self.entity_lexicon, **(entities or {})},
                             {**self.position_lexicon, **(positions or {})},
                             self.unspecified, self.negation_cues, self.uncertainty_cues,
                             dict(self.templates))

    def scan(self, sentence: str) -> list[tuple[str, int]]:
        """Longest-match lexicon hits, in sentence order, as ``(kind, value)``."""
        tokens = tokenize(sentence)
        hits = []
        i = 0
        while i < len(tokens):
            for n in range(min(self._maxlen, len(tokens) - i), 0, -1):
                hit = self._table.get(tuple(tokens[i:i + n]))
                if hit is not None:
                    hits.append(hit)
                    i += n
                    break
            else:
                i += 1
        return hits

    # -- persistence -----------------------------------------------------------
    def dumps(self) -> str:
        lines = ["[format]", f"tag = {GRAMMAR_FORMAT}", f"unspecified = {self.unspecified}", "",
                 "[entities]"]
        lines += [f"{s} = {i}" for s, i in self.entity_lexicon.items()]
        lines += ["", "[positions]"]
        lines += [f"{s} = {i}" for s, i in self.position_lexicon.items()]
        lines += ["", "[cues]", "negation = " + " | ".join(self.negation_cues),
                  "uncertainty = " + " | ".join(self.uncertainty_cues), "", "[templates]"]
        lines += [f"{k} = " + " | ".join(v) for k, v in self.templates.items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ReportGrammar":
        cp = configparser.ConfigParser(interpolation=None, delimiters=("=",))
        cp.optionxform = str
        cp.read_string(text)
        tag = cp.get("format", "tag", fallback=None)
        if tag != GRAMMAR_FORMAT:
            raise ValueError(f"unsupported grammar format {tag!r}")

        def split(v):
            return tuple(p.strip() for p in v.split("|") if p.strip())
        return cls({k: int(v) for k, v in cp["entities"].items()},
                   {k: int(v) for k, v in cp["positions"].items()},
                   cp.getint("format", "unspecified"),
                   split(cp["cues"]["negation"]), split(cp["cues"]["uncertainty"]),
                   {k: split(v) for k, v in cp["templates"].items()})

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "ReportGrammar":
        return cls.loads(Path(path).read_text())


def extract_triplets(sentence: str, grammar: ReportGrammar,
                     diagnostics: Counter | None = None) -> list[Triplet]:
    """Triplets mentioned in one sentence, in mention order.

    Sentences without any entity mention yield ``[]``; that case is tallied
    under ``"no_entity"`` in ``diagnostics`` when a counter is supplied.
    """
    hits = grammar.scan(sentence)
    mentions: list[list] = []          # [entity, label, positions]
    pending: list[int] = []            # positions seen before any entity
    cue = ExistLabel.PRESENT
    for kind, value in hits:
        if kind == "cue":
            cue = ExistLabel(value)
        elif kind == "entity":
            mentions.append([value, cue, pending])
            pending = []
        else:
            if mentions:
                mentions[-1][2].append(value)
            else:
                pending.append(value)
    if not mentions:
        if diagnostics is not None:
            diagnostics["no_entity"] += 1
            if pending:
                diagnostics["orphan_position"] += 1
        return []
    out = []
    for entity, label, positions in mentions:
        for pos in positions or [grammar.unspecified]:
            out.append(Triplet(entity, pos, label))
    return out


def merge_triplets(triplets) -> list[Triplet]:
    """One triplet per entity, sorted by (entity, position)."""
    best: dict[int, Triplet] = {}
    for t in triplets:
        cur = best.get(t.entity)
        if cur is None:
            best[t.entity] = t
            continue
        key_new = (PRECEDENCE[t.exist], -t.position)
        key_cur = (PRECEDENCE[cur.exist], -cur.position)
        if key_new > key_cur:
            best[t.entity] = t
    return sorted(best.values(), key=lambda t: (t.entity, t.position))


def parse_report(report: Report | str, grammar: ReportGrammar,
                 diagnostics: Counter | None = None) -> list[Triplet]:
    if isinstance(report, str):
        report = Report.from_text(report)
    found = []
    for s in report.sentences:
        found.extend(extract_triplets(s, grammar, diagnostics))
    return merge_triplets(found)


def _fill(template: str, **slots) -> str:
    text = template.format(**slots)
    return text[0].upper() + text[1:]


def emit_sentence(triplet: Triplet, grammar: ReportGrammar, choice: int = 0) -> str:
    """Render one triplet with the ``choice``-th template of its category."""
    cat = _CATEGORY[ExistLabel(triplet.exist)]
    slots = {"entity": grammar.entity_surface(triplet.entity)}
    if triplet.position != grammar.unspecified:
        cat += "_pos"
        slots["position"] = grammar.position_surface(triplet.position)
    options = grammar.templates[cat]
    return _fill(options[choice % len(options)], **slots)


def emit_absent_pair(first: int, second: int, grammar: ReportGrammar, choice: int = 0) -> str:
    options = grammar.templates["absent_pair"]
    return _fill(options[choice % len(options)], entity=grammar.entity_surface(first),
                 entity2=grammar.entity_surface(second))


def emit_report(triplets, grammar: ReportGrammar, choices=None) -> Report:
    """One sentence per triplet (no pairing, no filler); used for re-emission."""
    choices = choices or [0] * len(triplets)
    return Report([emit_sentence(t, grammar, c) for t, c in zip(triplets, choices)])
