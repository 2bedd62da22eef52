"""Entity-query transformer decoder over image patches.

Queries are text embeddings (one row per entity) projected to the model
width.  Each pre-norm decoder layer runs self-attention across queries,
cross-attention from queries to patches, and a feed-forward block.  Two
heads read the final query states: an existence logit per query and a
predicted position embedding per query.  Cross-attention weights of every
layer and head are kept for grounding heatmaps.

Queries carry no positional encoding, so the decoder is equivariant to
permuting query rows.  Self-attention gathers its keys in a canonical row
order (lexicographic over the input query embeddings), so its summation
order does not depend on how the queries were listed and the equivariance
is exact in floating point.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class FusionOutput:
    exist_logits: Tensor        # (B, Q)
    position_preds: Tensor      # (B, Q, d')
    attn_maps: np.ndarray       # (B, L, heads, Q, h*w)
    grid: tuple[int, int]       # (h, w)


def _linear_init(rng, fan_in, fan_out, zero=False):
    w = np.zeros((fan_in, fan_out)) if zero else rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
    return Tensor(w, requires_grad=True), Tensor(np.zeros(fan_out), requires_grad=True)


def sinusoid_2d(h: int, w: int, d: int) -> np.ndarray:
    """(h*w, d) table: sin/cos of the row index in the first half, of the column in the second."""
    if d % 4:
        raise ValueError(f"width {d} is not divisible by 4")
    q = d // 4
    freqs = 1.0 / 10.0 ** (np.arange(q) / q)
    r, c = np.divmod(np.arange(h * w), w)
    return np.concatenate([np.sin(np.outer(r, freqs)), np.cos(np.outer(r, freqs)),
                           np.sin(np.outer(c, freqs)), np.cos(np.outer(c, freqs))], axis=1)


def init_fusion_params(d: int, d_text: int, layers: int, heads: int, ffn: int, grid: tuple[int, int],
                       rng: np.random.Generator) -> dict[str, Tensor]:
    """Random linear layers, unit norms, and a learnable patch position table
    started from :func:`sinusoid_2d` over the ``grid`` = (h, w) patch layout."""
    if d % heads:
        raise ValueError(f"model width {d} is not divisible by {heads} heads")
    p: dict[str, Tensor] = {}

    def lin(name, fi, fo):
        p[name + ".w"], p[name + ".b"] = _linear_init(rng, fi, fo)

    def norm(name, dim):
        p[name + ".g"] = Tensor(np.ones(dim), requires_grad=True)
        p[name + ".b"] = Tensor(np.zeros(dim), requires_grad=True)

    lin("fus.query_proj", d_text, d)
    norm("fus.mem_norm", d)
    p["fus.patch_pos"] = Tensor(sinusoid_2d(grid[0], grid[1], d), requires_grad=True)
    for i in range(layers):
        pre = f"fus.layer{i}"
        for block in ("self", "cross"):
            norm(f"{pre}.{block}_norm", d)
            for proj in ("q", "k", "v", "o"):
                lin(f"{pre}.{block}.{proj}", d, d)
            # A key bias shifts every score of a query row equally; softmax ignores it.
            del p[f"{pre}.{block}.k.b"]
        norm(f"{pre}.ffn_norm", d)
        lin(f"{pre}.ffn1", d, ffn)
        lin(f"{pre}.ffn2", ffn, d)
    norm("fus.out_norm", d)
    lin("fus.exist1", d, d)
    lin("fus.exist2", d, 1)
    lin("fus.pos1", d, d)
    lin("fus.pos2", d, d_text)
    return p


def _dense(x: Tensor, p: dict, name: str) -> Tensor:
    return ad.matmul(x, p[name + ".w"]) + p[name + ".b"]


def _norm(x: Tensor, p: dict, name: str) -> Tensor:
    return ad.layer_norm(x, p[name + ".g"], p[name + ".b"])


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, n, d = x.shape
    return ad.transpose(x.reshape(B, n, heads, d // heads), (0, 2, 1, 3))


def attention(x: Tensor, mem: Tensor, p: dict, name: str, heads: int,
              value_mem: Tensor | None = None) -> tuple[Tensor, np.ndarray]:
    """Multi-head scaled dot-product attention; returns output and weights (B, heads, Q, N).

    Keys come from ``mem``; values from ``value_mem`` when given, else ``mem``.
    """
    B, nq, d = x.shape
    q = _split_heads(_dense(x, p, name + ".q"), heads)
    k = _split_heads(ad.matmul(mem, p[name + ".k.w"]), heads)
    v = _split_heads(_dense(mem if value_mem is None else value_mem, p, name + ".v"), heads)
    scores = ad.scale(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / np.sqrt(d // heads))
    weights = ad.softmax(scores, axis=-1)
    out = ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)).reshape(B, nq, d)
    return _dense(out, p, name + ".o"), weights.data


def canonical_order(queries: np.ndarray) -> np.ndarray:
    """Row order that depends only on the set of query rows."""
    return np.lexsort(np.asarray(queries).T[::-1])


def num_layers(params: dict) -> int:
    return sum(1 for k in params if k.startswith("fus.layer") and k.endswith(".ffn1.w"))


def fuse(features, queries: np.ndarray, params: dict[str, Tensor], heads: int,
         self_attention: bool = True) -> FusionOutput:
    """Run the decoder for patch features ``(B, h, w, d)`` and query embeddings ``(Q, d')``."""
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[0] == 0:
        raise ValueError("query matrix must be a non-empty (Q, d') array")
    if queries.shape[1] != params["fus.query_proj.w"].shape[0]:
        raise ValueError(f"query width {queries.shape[1]} does not match "
                         f"{params['fus.query_proj.w'].shape[0]}")
    features = ad.as_tensor(features)
    if features.ndim == 3:
        features = features.reshape((1,) + features.shape)
    B, h, w, d = features.shape
    if d != params["fus.query_proj.w"].shape[1]:
        raise ValueError(f"feature width {d} does not match model width")
    mem = _norm(features.reshape(B, h * w, d), params, "fus.mem_norm")
    pos = params["fus.patch_pos"]
    if pos.shape != (h * w, d):
        raise ValueError(f"patch position table {pos.shape} does not match a {h}x{w} grid")
    mem_values = mem + pos
    x = ad.add(Tensor(np.zeros((B, queries.shape[0], d))), _dense(Tensor(queries), params, "fus.query_proj"))
    order = canonical_order(queries)
    maps = []
    for i in range(num_layers(params)):
        pre = f"fus.layer{i}"
        if self_attention:
            y = _norm(x, params, f"{pre}.self_norm")
            y_sorted = ad.take(y, order, axis=1)
            x = x + attention(y, y_sorted, params, f"{pre}.self", heads)[0]
        y = _norm(x, params, f"{pre}.cross_norm")
        out, weights = attention(y, mem, params, f"{pre}.cross", heads, mem_values)
        maps.append(weights)
        x = x + out
        y = _norm(x, params, f"{pre}.ffn_norm")
        x = x + _dense(ad.relu(_dense(y, params, f"{pre}.ffn1")), params, f"{pre}.ffn2")
    x = _norm(x, params, "fus.out_norm")
    logits = _dense(ad.relu(_dense(x, params, "fus.exist1")), params, "fus.exist2")
    logits = logits.reshape(B, queries.shape[0])
    pos = _dense(ad.relu(_dense(x, params, "fus.pos1")), params, "fus.pos2")
    return FusionOutput(logits, pos, np.stack(maps, axis=1), (h, w))


def append_zero_shot_query(queries: np.ndarray, description_embedding: np.ndarray) -> np.ndarray:
    """Query matrix with one extra row; existing rows are copied unchanged."""
    queries = np.asarray(queries, dtype=np.float64)
    emb = np.asarray(description_embedding, dtype=np.float64).reshape(1, -1)
    if emb.shape[1] != queries.shape[1]:
        raise ValueError(f"description embedding has width {emb.shape[1]}, expected {queries.shape[1]}")
    return np.vstack([queries, emb])


def layer_head_maps(out: FusionOutput, query_index: int, batch_index: int = 0) -> np.ndarray:
    """Per-layer, per-head attention of one query, shaped (L, heads, h, w)."""
    if not 0 <= query_index < out.attn_maps.shape[3]:
        raise IndexError(f"query index {query_index} out of range")
    h, w = out.grid
    m = out.attn_maps[batch_index, :, :, query_index, :]
    return m.reshape(m.shape[0], m.shape[1], h, w)


def extract_heatmap(out: FusionOutput, query_index: int, H: int, W: int,
                    batch_index: int = 0) -> np.ndarray:
    """Layer- and head-averaged cross-attention, nearest-upsampled to (H, W)."""
    h, w = out.grid
    if H % h or W % w:
        raise ValueError(f"target size {H}x{W} is not a multiple of the {h}x{w} grid")
    coarse = layer_head_maps(out, query_index, batch_index).mean(axis=(0, 1))
    return np.repeat(np.repeat(coarse, H // h, axis=0), W // w, axis=1)
