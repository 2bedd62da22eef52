"""Losses, optimizer and the training loop.

The existence loss is binary cross-entropy on logits, taken only over
entities whose exist token is 0 or 1 (uncertain and unmentioned entities are
skipped).  The position loss contrasts each predicted position embedding
against the embedding of the reported position and ``M`` negatives drawn
from the rest of the position bank, with raw (un-normalized) inner
products.  ``variant="log"`` applies ``-log`` to the softmax ratio;
``variant="literal"`` uses the negated ratio itself.

Both losses average per sample over that sample's contributing entities and
then average over the samples in the batch.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .knowledge import KnowledgeBase
from .reports import ExistLabel, Triplet

UNMENTIONED = -2
NO_POSITION = -1


@dataclass
class TrainConfig:
    alpha_loc: float = 1.0
    alpha_cls: float = 1.0
    negatives: int = 4
    lr: float = 2e-3
    warmup_lr: float = 1e-4
    warmup_epochs: int = 2
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    loc_variant: str = "log"
    entity_translation: bool = True
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.betas = tuple(self.betas)

    def validate(self, num_positions: int | None = None) -> None:
        if self.alpha_loc < 0 or self.alpha_cls < 0:
            raise ValueError("loss weights must be non-negative")
        if self.negatives < 1:
            raise ValueError("at least one negative position is required")
        if num_positions is not None and self.negatives >= num_positions:
            raise ValueError(f"{self.negatives} negatives need more than {num_positions} positions")
        if self.loc_variant not in ("log", "literal"):
            raise ValueError(f"unknown position-loss variant {self.loc_variant!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")
        if self.lr <= 0 or self.warmup_lr <= 0 or self.warmup_epochs < 0:
            raise ValueError("learning rates must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def supervision_targets(triplets: list[Triplet], kb: KnowledgeBase) -> tuple[np.ndarray, np.ndarray]:
    """Exist tokens and positive position ids over the query set.

    Unmentioned entities get ``UNMENTIONED``.  A positive position exists only
    for present findings reported at a specific (non-``unspecified``) position.
    """
    exist = np.full(kb.num_queries, UNMENTIONED, dtype=np.int64)
    pos = np.full(kb.num_queries, NO_POSITION, dtype=np.int64)
    row = {e: i for i, e in enumerate(kb.seen)}
    for t in triplets:
        i = row.get(t.entity)
        if i is None:
            continue
        exist[i] = int(t.exist)
        if t.exist == ExistLabel.PRESENT and t.position != kb.unspecified_id:
            pos[i] = t.position
    return exist, pos


def _per_sample_weights(mask: np.ndarray) -> np.ndarray:
    counts = mask.sum(axis=1, keepdims=True)
    return np.where(mask, 1.0 / np.maximum(counts, 1), 0.0) / mask.shape[0]


def loss_cls(exist_logits: Tensor, exist_targets) -> Tensor:
    """Mean BCE over entities labelled 0 or 1; exactly 0 when there are none."""
    logits = ad.as_tensor(exist_logits)
    y = np.atleast_2d(np.asarray(exist_targets))
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    if logits.shape != y.shape:
        raise ad.ShapeError(f"logits {logits.shape} vs targets {y.shape}")
    mask = (y == 0) | (y == 1)
    if not mask.any():
        return ad.scale(ad.tsum(logits), 0.0)
    idx = np.flatnonzero(mask)
    x = ad.take(logits.reshape(-1), idx)
    per = ad.softplus(x) - x * Tensor(y.reshape(-1)[idx].astype(float))
    return ad.tsum(per * Tensor(_per_sample_weights(mask).reshape(-1)[idx]))


def sample_negatives(positive: int, num_positions: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """``m`` distinct position ids, never ``positive``."""
    pool = np.delete(np.arange(num_positions), positive)
    return rng.choice(pool, size=m, replace=False)


def keyed_negatives(position_targets: np.ndarray, num_positions: int, m: int, seed: int,
                    epoch: int, sample_ids) -> np.ndarray:
    """Negatives for every (sample, entity) with a positive position.

    Each draw uses its own generator keyed by (seed, epoch, sample id, entity
    index), so the stream does not depend on batch composition.  Rows with
    no positive position are filled with -1.
    """
    pt = np.atleast_2d(position_targets)
    out = np.full(pt.shape + (m,), -1, dtype=np.int64)
    for b, q in zip(*np.nonzero(pt >= 0)):
        rng = np.random.default_rng([seed, epoch, int(sample_ids[b]), int(q)])
        out[b, q] = sample_negatives(int(pt[b, q]), num_positions, m, rng)
    return out


def loss_loc(position_preds: Tensor, position_targets, position_bank: np.ndarray,
             m: int | None = None, rng: np.random.Generator | None = None,
             negatives: np.ndarray | None = None, variant: str = "log") -> Tensor:
    """Contrastive position loss.

    Pass either explicit ``negatives`` (shape targets + (M,)) or ``m`` with an
    ``rng`` to draw them.  Returns exactly 0 when no entity has a positive
    position.
    """
    preds = ad.as_tensor(position_preds)
    if preds.ndim == 2:
        preds = preds.reshape((1,) + preds.shape)
    pt = np.atleast_2d(np.asarray(position_targets))
    bank = np.asarray(position_bank, dtype=np.float64)
    if variant not in ("log", "literal"):
        raise ValueError(f"unknown position-loss variant {variant!r}")
    mask = pt >= 0
    if not mask.any():
        return ad.scale(ad.tsum(preds), 0.0)
    if negatives is None:
        if m is None or rng is None:
            raise ValueError("need explicit negatives or (m, rng)")
        if m >= bank.shape[0]:
            raise ValueError(f"{m} negatives need more than {bank.shape[0]} positions")
        negatives = np.full(pt.shape + (m,), -1, dtype=np.int64)
        for b, q in zip(*np.nonzero(mask)):
            negatives[b, q] = sample_negatives(int(pt[b, q]), bank.shape[0], m, rng)
    negatives = np.asarray(negatives).reshape(pt.shape + (-1,))
    B, Q, dt = preds.shape
    idx = np.flatnonzero(mask)
    cand_ids = np.concatenate([pt.reshape(-1)[idx, None], negatives.reshape(B * Q, -1)[idx]], axis=1)
    cand = bank[cand_ids]                                    # (K, M+1, d')
    sel = ad.take(preds.reshape(B * Q, dt), idx).reshape(len(idx), 1, dt)
    scores = ad.matmul(sel, Tensor(np.swapaxes(cand, 1, 2))).reshape(len(idx), cand.shape[1])
    if variant == "log":
        per = -ad.take(ad.log_softmax(scores, axis=1), [0], axis=1).reshape(len(idx))
    else:
        per = -ad.take(ad.softmax(scores, axis=1), [0], axis=1).reshape(len(idx))
    return ad.tsum(per * Tensor(_per_sample_weights(mask).reshape(-1)[idx]))


def total_loss(l_cls: Tensor, l_loc: Tensor, alpha_loc: float = 1.0, alpha_cls: float = 1.0) -> Tensor:
    return ad.scale(l_loc, alpha_loc) + ad.scale(l_cls, alpha_cls)


class AdamW:
    """Adam with decoupled weight decay, applied to every parameter."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-4):
        self.params = params
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for k, p in self.params.items():
            g = p.grad
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {"adam.step": np.array([float(self.step_count)])}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.step_count = int(state["adam.step"][0])
        for k in self.params:
            self.m[k] = np.array(state[f"adam.m.{k}"])
            self.v[k] = np.array(state[f"adam.v.{k}"])


def learning_rate(cfg: TrainConfig, step: int, steps_per_epoch: int) -> float:
    """Linear warm-up from ``warmup_lr`` to ``lr`` over the warm-up epochs, then constant."""
    warm = cfg.warmup_epochs * steps_per_epoch
    if warm == 0 or step >= warm:
        return cfg.lr
    return cfg.warmup_lr + (cfg.lr - cfg.warmup_lr) * step / warm


@dataclass
class EpochRecord:
    epoch: int
    l_cls: float
    l_loc: float
    total: float
    wall: float

    def line(self) -> str:
        return f"{self.epoch},{self.l_cls:.10g},{self.l_loc:.10g},{self.total:.10g},{self.wall:.3f}"


@dataclass
class TrainResult:
    optimizer: AdamW
    epoch: int
    history: list[EpochRecord] = field(default_factory=list)


def train(model, images: np.ndarray, exist_targets: np.ndarray, position_targets: np.ndarray,
          cfg: TrainConfig, sample_ids=None, on_epoch: Callable[[EpochRecord], None] | None = None,
          optimizer: AdamW | None = None, start_epoch: int = 0) -> TrainResult:
    """Optimize ``model.params`` in place.

    ``images`` is (N, H, W, C); targets are (N, |Q|) arrays from
    :func:`supervision_targets`.  The shuffle for epoch ``e`` comes from a
    generator keyed by (seed, e) and negatives from :func:`keyed_negatives`,
    so a run is a pure function of its inputs.
    """
    n = len(images)
    if n == 0:
        raise ValueError("training set is empty")
    cfg.validate(model.kb.num_positions)
    sample_ids = np.arange(n) if sample_ids is None else np.asarray(sample_ids)
    opt = optimizer or AdamW(model.params, cfg.lr, cfg.betas, cfg.adam_eps, cfg.weight_decay)
    steps_per_epoch = -(-n // cfg.batch_size)
    queries = model.queries
    bank = model.position_bank
    history = []
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        perm = np.random.default_rng([cfg.seed, epoch, 17]).permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, cfg.batch_size):
            bidx = perm[start:start + cfg.batch_size]
            out = model.forward(images[bidx], queries)
            lc = loss_cls(out.exist_logits, exist_targets[bidx])
            negs = keyed_negatives(position_targets[bidx], bank.shape[0], cfg.negatives, cfg.seed,
                                   epoch, sample_ids[bidx])
            ll = loss_loc(out.position_preds, position_targets[bidx], bank, negatives=negs,
                          variant=cfg.loc_variant)
            loss = total_loss(lc, ll, cfg.alpha_loc, cfg.alpha_cls)
            opt.zero_grad()
            loss.backward()
            opt.step(learning_rate(cfg, opt.step_count, steps_per_epoch))
            sums += len(bidx) * np.array([lc.item(), ll.item(), loss.item()])
        means = sums / n
        rec = EpochRecord(epoch + 1, *means, time.perf_counter() - t0)
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return TrainResult(opt, cfg.epochs, history)
