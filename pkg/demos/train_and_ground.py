"""Train on the desk world, then ground a seen and a held-out entity.

Generates the 2000-sample desk dataset, trains for the preset's 20 epochs
(under a minute on one core), prints the test metrics and draws
heatmaps as text.  The held-out entity is never supervised; it is queried
once by its attribute description and once by its bare name.

    python demos/train_and_ground.py [seed]
"""
import sys

import numpy as np

from entalign.config import merge, preset
from entalign.inference import evaluate, predict, summary_table
from entalign.runs import fit, split_dataset
from entalign.world import generate_dataset

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cfg = merge(preset("desk"), {"seed": seed, "train": {"seed": seed}})
kb = cfg.knowledge_base()
data = generate_dataset(cfg.world, cfg.n_samples, cfg.seed, kb, cfg.grammar(kb))
test = split_dataset(cfg, data)[2]

model, result = fit(cfg, data, kb, on_epoch=lambda r: print(r.line(), flush=True))
print()
print(summary_table(evaluate(model, test)))

SHADES = " .:-=+*#%@"


def draw(heat, mask, title):
    """Heatmap at half resolution, with the true mask beside it."""
    print(title)
    h = heat.reshape(16, 2, 16, 2).mean(axis=(1, 3))
    m = mask.reshape(16, 2, 16, 2).any(axis=(1, 3))
    for row_h, row_m in zip(h, m):
        print("   " + "".join(SHADES[min(int(v * 10), 9)] for v in row_h)
              + "   " + "".join("#" if inside else "." for inside in row_m))


def show(entity, query, label):
    sample = next(s for s in test if s.labels[entity] and entity in s.masks)
    score, heat = predict(model, sample.image[None], query)
    draw(heat[0], sample.masks[entity], f"\n{label}: score {score[0]:.3f} on sample {sample.index}")


seen = kb.seen[0]
show(seen, seen, f"seen entity '{kb.names[seen]}'")
target = kb.unseen[0]
show(target, kb.descriptions[target], f"held-out '{kb.names[target]}' by description")
show(target, kb.names[target], f"held-out '{kb.names[target]}' by name")

images = np.stack([s.image for s in test])
y = np.array([s.labels[target] for s in test], dtype=bool)
for label, query in (("description", kb.descriptions[target]), ("name", kb.names[target])):
    scores = predict(model, images, query)[0]
    print(f"mean score, {label:<11}: positives {scores[y].mean():.3f}  negatives {scores[~y].mean():.3f}")
