"""Existence scores and grounding heatmaps for seen and zero-shot queries.

Seen entities read their own row of the query matrix.  Anything else (a
free-text description, or an unseen entity's bare name) is embedded and
appended to the query matrix as one extra row for that forward pass.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import _sigmoid, no_grad
from .fusion import append_zero_shot_query, extract_heatmap
from .metrics import (auc, detection_pr, dice_iou_best_threshold, f1_acc_at_best_threshold,
                      normalize_heatmap, pointing_game)


def resolve_query(model, query) -> tuple[np.ndarray, int]:
    """Query matrix to run and the row holding ``query``.

    ``query`` is a seen entity id or a description string; unseen ids are
    rejected because they have no row and no description was given.
    """
    if isinstance(query, str):
        if not query.strip():
            raise ValueError("empty description")
        return append_zero_shot_query(model.queries, model.embedder.embed(query)), model.kb.num_queries
    return model.queries, model.kb.query_index(int(query))


def predict(model, images, query, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Scores (N,) and min-max normalized heatmaps (N, H, W) for one query."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    queries, row = resolve_query(model, query)
    H, W = images.shape[1:3]
    scores, maps = [], []
    with no_grad():
        for s in range(0, len(images), batch_size):
            out = model.forward(images[s:s + batch_size], queries)
            scores.append(_sigmoid(out.exist_logits.data[:, row]))
            for b in range(out.exist_logits.shape[0]):
                maps.append(normalize_heatmap(extract_heatmap(out, row, H, W, batch_index=b)))
    return np.concatenate(scores), np.stack(maps)


def classify(model, image, query) -> float:
    return float(predict(model, image, query)[0][0])


def ground(model, image, query) -> np.ndarray:
    return predict(model, image, query)[1][0]


@dataclass(frozen=True)
class MetricRecord:
    metric: str
    entity: str
    value: float
    n: int

    def line(self) -> str:
        return f"{self.metric},{self.entity},{self.value:.6f},{self.n}"


def evaluation_queries(model, include_names: bool = True) -> list[tuple[str, int, object]]:
    """(label, entity id, query) triples: every seen entity, and each unseen
    entity by description and (optionally) by bare name."""
    kb = model.kb
    out = [(kb.names[e], e, e) for e in kb.seen]
    for e in kb.unseen:
        out.append((f"{kb.names[e]}:description", e, kb.descriptions[e]))
        if include_names:
            out.append((f"{kb.names[e]}:name", e, kb.names[e].replace("_", " ")))
    return out


def evaluate(model, samples, queries=None, batch_size: int = 64) -> list[MetricRecord]:
    """Metric records over ``samples`` for each query.

    Classification rows (auc/f1/acc) need both classes present; grounding
    rows (pointing, dice, iou, det_precision, det_recall) need at least one
    positive instance with a mask.  Detection runs over every sample: a
    heatmap is a predicted detection when the existence score clears the
    F1-best threshold, and negatives carry an empty mask.  Pooled rows over all seen entities are
    appended as ``macro_auc`` and ``pointing`` with entity ``seen``.
    """
    queries = evaluation_queries(model) if queries is None else queries
    images = np.stack([s.image for s in samples])
    records: list[MetricRecord] = []
    seen_aucs, seen_hits = [], []
    seen_ids = set(model.kb.seen)
    blank = np.zeros(images.shape[1:3], dtype=bool)
    for label, entity, query in queries:
        scores, maps = predict(model, images, query, batch_size)
        y = np.array([s.labels[entity] for s in samples], dtype=bool)
        zero_shot = isinstance(query, str)
        if y.any() and not y.all():
            a = auc(scores, y)
            f1, acc, _ = f1_acc_at_best_threshold(scores, y)
            records += [MetricRecord("auc", label, a, len(y)), MetricRecord("f1", label, f1, len(y)),
                        MetricRecord("acc", label, acc, len(y))]
            if entity in seen_ids and not zero_shot:
                seen_aucs.append(a)
        pos = np.flatnonzero(y)
        if len(pos):
            masks = [samples[i].masks[entity] for i in pos]
            hits = [pointing_game(maps[i], m) for i, m in zip(pos, masks)]
            dices, ious = zip(*[dice_iou_best_threshold(maps[i], m)[:2] for i, m in zip(pos, masks)])
            # A heatmap counts as a detection only where the classifier says present.
            flags = scores > f1_acc_at_best_threshold(scores, y)[2]
            prec, rec = detection_pr(maps, [s.masks.get(entity, blank) for s in samples],
                                     predicted=flags)
            k = len(pos)
            records += [MetricRecord("pointing", label, float(np.mean(hits)), k),
                        MetricRecord("dice", label, float(np.mean(dices)), k),
                        MetricRecord("iou", label, float(np.mean(ious)), k),
                        MetricRecord("det_precision", label, prec, len(y)),
                        MetricRecord("det_recall", label, rec, k)]
            if entity in seen_ids and not zero_shot:
                seen_hits += hits
    if seen_aucs:
        records.append(MetricRecord("macro_auc", "seen", float(np.mean(seen_aucs)), len(seen_aucs)))
    if seen_hits:
        records.append(MetricRecord("pointing", "seen", float(np.mean(seen_hits)), len(seen_hits)))
    return records


def lookup(records, metric: str, entity: str) -> float:
    for r in records:
        if r.metric == metric and r.entity == entity:
            return r.value
    raise KeyError((metric, entity))


def format_report(records) -> str:
    return "metric,entity,value,n\n" + "\n".join(r.line() for r in records) + "\n"


def summary_table(records) -> str:
    metrics = []
    for r in records:
        if r.metric not in metrics:
            metrics.append(r.metric)
    entities = []
    for r in records:
        if r.entity not in entities:
            entities.append(r.entity)
    table = {(r.entity, r.metric): r.value for r in records}
    width = max(len(e) for e in entities) + 2
    head = "entity".ljust(width) + "".join(m[:13].rjust(14) for m in metrics)
    rows = [head, "-" * len(head)]
    for e in entities:
        cells = "".join((f"{table[(e, m)]:.4f}" if (e, m) in table else "-").rjust(14) for m in metrics)
        rows.append(e.ljust(width) + cells)
    return "\n".join(rows)
