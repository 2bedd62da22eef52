"""Glue between configs, datasets, models and checkpoints."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .autodiff import Tensor
from .checkpoint import Checkpoint
from .config import RunConfig
from .knowledge import KnowledgeBase
from .model import Model
from .training import AdamW, EpochRecord, TrainResult, supervision_targets, train
from .world import Sample, split


def build_model(cfg: RunConfig, kb: KnowledgeBase) -> Model:
    return Model(cfg.model, kb, seed=cfg.seed, entity_translation=cfg.train.entity_translation)


def stack_targets(samples: list[Sample], kb: KnowledgeBase) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Images (N, H, W, C), exist targets and position targets, both (N, |Q|)."""
    pairs = [supervision_targets(s.triplets, kb) for s in samples]
    return (np.stack([s.image for s in samples]), np.stack([p[0] for p in pairs]),
            np.stack([p[1] for p in pairs]))


def split_dataset(cfg: RunConfig, samples: list[Sample]):
    return split(samples, cfg.fractions, cfg.seed)


def fit(cfg: RunConfig, samples: list[Sample], kb: KnowledgeBase,
        on_epoch: Callable[[EpochRecord], None] | None = None) -> tuple[Model, TrainResult]:
    """Train a fresh model on the training split of ``samples``."""
    train_part = split_dataset(cfg, samples)[0]
    model = build_model(cfg, kb)
    images, exist, position = stack_targets(train_part, kb)
    result = train(model, images, exist, position, cfg.train,
                   sample_ids=[s.index for s in train_part], on_epoch=on_epoch)
    return model, result


def to_checkpoint(model: Model, cfg: RunConfig, result: TrainResult) -> Checkpoint:
    return Checkpoint(cfg.fingerprint(), result.epoch,
                      {k: p.data for k, p in model.params.items()},
                      result.optimizer.state(), cfg.portable_dict(), model.kb.dumps())


def from_checkpoint(ckpt: Checkpoint) -> tuple[Model, RunConfig]:
    cfg = RunConfig.from_dict(ckpt.config)
    kb = KnowledgeBase.loads(ckpt.kb_text)
    params = {k: Tensor(v.copy(), requires_grad=True) for k, v in ckpt.params.items()}
    model = Model(cfg.model, kb, seed=cfg.seed, entity_translation=cfg.train.entity_translation,
                  params=params)
    return model, cfg


def restore_optimizer(model: Model, cfg: RunConfig, ckpt: Checkpoint) -> AdamW:
    t = cfg.train
    opt = AdamW(model.params, t.lr, t.betas, t.adam_eps, t.weight_decay)
    opt.load_state(ckpt.optimizer)
    return opt
