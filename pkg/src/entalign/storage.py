"""Portable graymaps and on-disk datasets.

A dataset directory holds::

    manifest.txt     key value lines: format, n, seed, channels, spec_hash
    spec.json        the world spec (its sha256 is spec_hash)
    kb.txt           knowledge base
    grammar.txt      report grammar
    images/NNNNNN.pgm
    masks/NNNNNN_E.pgm         one per visible entity E
    reports/NNNNNN.txt         one sentence per line
    labels.csv       index,entity,label
    triplets.csv     index,entity,position,exist
    samples.csv      index,has_unseen
"""
from __future__ import annotations

import csv
import json
import re
from pathlib import Path

import numpy as np

from .knowledge import KnowledgeBase
from .reports import ExistLabel, Report, ReportGrammar, Triplet
from .world import Sample, WorldSpec

DATASET_FORMAT = "entalign-dataset/1"


# ---------------------------------------------------------------------------
# P5 graymaps

def to_gray8(image) -> np.ndarray:
    """Quantize values in [0, 1] to uint8; a trailing channel axis keeps channel 0."""
    a = np.asarray(image, dtype=np.float64)
    if a.ndim == 3:
        a = a[:, :, 0]
    if a.ndim != 2:
        raise ValueError(f"expected an (H, W) or (H, W, C) image, got shape {a.shape}")
    return np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, image) -> None:
    g = to_gray8(image)
    h, w = g.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + g.tobytes())


def read_pgm(path) -> np.ndarray:
    """Raw uint8 (H, W) pixels of a binary (P5) graymap with maxval <= 255."""
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*([^\s#]+)").match(data, pos)
        if m is None:
            raise ValueError(f"{path}: malformed graymap header")
        tokens.append(m.group(2))
        pos = m.end()
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary graymap (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if not 0 < maxval < 256:
        raise ValueError(f"{path}: only 8-bit graymaps are supported")
    pos += 1                                     # single whitespace after maxval
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    return pixels.reshape(h, w).copy()


def read_image(path, channels: int = 1) -> np.ndarray:
    """Graymap as float (H, W, channels) in [0, 1]."""
    g = read_pgm(path).astype(np.float64) / 255.0
    return np.repeat(g[:, :, None], channels, axis=2)


# ---------------------------------------------------------------------------
# datasets

def _stem(i: int) -> str:
    return f"{i:06d}"


def save_dataset(out_dir, samples: list[Sample], spec: WorldSpec, seed: int,
                 kb: KnowledgeBase, grammar: ReportGrammar) -> Path:
    out = Path(out_dir)
    for sub in ("images", "masks", "reports"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    kb.save(out / "kb.txt")
    grammar.save(out / "grammar.txt")
    labels, trips, flags = [], [], []
    for s in samples:
        stem = _stem(s.index)
        write_pgm(out / "images" / f"{stem}.pgm", s.image)
        for e in sorted(s.masks):
            write_pgm(out / "masks" / f"{stem}_{e}.pgm", s.masks[e].astype(float))
        (out / "reports" / f"{stem}.txt").write_text("".join(x + "\n" for x in s.report.sentences))
        labels += [(s.index, e, int(v)) for e, v in enumerate(s.labels)]
        trips += [(s.index, t.entity, t.position, int(t.exist)) for t in s.triplets]
        flags.append((s.index, int(s.has_unseen)))
    _write_csv(out / "labels.csv", ("index", "entity", "label"), labels)
    _write_csv(out / "triplets.csv", ("index", "entity", "position", "exist"), trips)
    _write_csv(out / "samples.csv", ("index", "has_unseen"), flags)
    manifest = {"format": DATASET_FORMAT, "n": len(samples), "seed": seed,
                "channels": spec.channels, "spec_hash": spec.spec_hash()}
    (out / "manifest.txt").write_text("".join(f"{k} {v}\n" for k, v in manifest.items()))
    return out


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_csv(path: Path) -> list[list[int]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [[int(v) for v in r] for r in rows[1:]]


def read_manifest(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            key, _, value = line.partition(" ")
            out[key] = value.strip()
    return out


def load_dataset(data_dir) -> tuple[list[Sample], WorldSpec, KnowledgeBase, ReportGrammar, dict]:
    """Samples plus the spec, knowledge base, grammar and manifest they were generated with."""
    root = Path(data_dir)
    if not (root / "manifest.txt").exists():
        raise FileNotFoundError(f"{root} has no manifest.txt")
    manifest = read_manifest(root / "manifest.txt")
    if manifest.get("format") != DATASET_FORMAT:
        raise ValueError(f"unsupported dataset format {manifest.get('format')!r}")
    spec = WorldSpec.from_dict(json.loads((root / "spec.json").read_text()))
    if spec.spec_hash() != manifest["spec_hash"]:
        raise ValueError("spec.json does not match the manifest spec hash")
    kb = KnowledgeBase.load(root / "kb.txt")
    grammar = ReportGrammar.load(root / "grammar.txt")
    channels = int(manifest["channels"])
    n_ent = len(kb.names)
    labels: dict[int, np.ndarray] = {}
    for i, e, v in _read_csv(root / "labels.csv"):
        labels.setdefault(i, np.zeros(n_ent, dtype=np.int64))[e] = v
    trips: dict[int, list[Triplet]] = {}
    for i, e, p, x in _read_csv(root / "triplets.csv"):
        trips.setdefault(i, []).append(Triplet(e, p, ExistLabel(x)))
    samples = []
    for i, flag in _read_csv(root / "samples.csv"):
        stem = _stem(i)
        image = read_image(root / "images" / f"{stem}.pgm", channels)
        masks = {e: read_pgm(root / "masks" / f"{stem}_{e}.pgm") > 0
                 for e in np.flatnonzero(labels[i]).tolist()}
        sentences = (root / "reports" / f"{stem}.txt").read_text().splitlines()
        samples.append(Sample(i, image, Report(sentences), labels[i], masks, trips.get(i, []),
                              bool(flag)))
    if len(samples) != int(manifest["n"]):
        raise ValueError(f"manifest lists {manifest['n']} samples, found {len(samples)}")
    return samples, spec, kb, grammar, manifest
