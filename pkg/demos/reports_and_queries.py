"""From report text to entity queries.

Parses a hand-written report into (entity, position, exist) triplets, then
shows how description text shapes the query embeddings: the held-out
entity sits close to the seen entities it shares attributes with, while its
bare name shares nothing with them.

    python demos/reports_and_queries.py
"""
import numpy as np

from entalign.config import preset
from entalign.knowledge import TextEmbedder, embed_entity
from entalign.reports import Report, parse_report

cfg = preset("desk")
kb = cfg.knowledge_base()
grammar = cfg.grammar(kb)

text = ("There is mass in the left apex. No evidence of cyst. "
        "Possible nodule in the right lower lobe. No mass in the right apex. "
        "The technique is satisfactory.")
print("report:", text)
for t in parse_report(Report.from_text(text), grammar):
    print(f"  {kb.names[t.entity]:<10} {kb.positions[t.position]:<18} {t.exist.name}")

embedder = TextEmbedder(cfg.model.d_text, cfg.model.embed_seed)


def cosine(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


target = kb.unseen[0]
print(f"\nheld-out entity '{kb.names[target]}': {kb.descriptions[target]}")
by_description = embed_entity(kb.descriptions[target], kb, embedder)
by_name = embedder.embed(kb.names[target])
print(f"{'seen entity':<14} {'description':<40} {'cos(desc)':>9} {'cos(name)':>9}")
for e in kb.seen:
    seen_vec = embed_entity(e, kb, embedder)
    print(f"{kb.names[e]:<14} {kb.descriptions[e]:<40} {cosine(by_description, seen_vec):9.3f} "
          f"{cosine(by_name, seen_vec):9.3f}")
