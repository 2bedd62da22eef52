"""Visual encoder + fusion decoder bundled with the knowledge base they query."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor
from .fusion import FusionOutput, fuse, init_fusion_params
from .knowledge import KnowledgeBase, TextEmbedder, build_query_embeddings, embed_entity
from .vision import encode_image, init_vision_params, total_stride


@dataclass
class ModelConfig:
    image_size: int = 32
    channels: int = 1
    conv_channels: tuple[int, ...] = (8, 16, 32)
    d: int = 32
    d_text: int = 64
    layers: int = 2
    heads: int = 4
    ffn: int = 64
    self_attention: bool = True
    embed_seed: int = 0

    def __post_init__(self):
        self.conv_channels = tuple(self.conv_channels)

    @property
    def stride(self) -> int:
        return total_stride(self.conv_channels)

    @property
    def grid(self) -> int:
        return self.image_size // self.stride

    def validate(self) -> None:
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.image_size % self.stride:
            raise ValueError(f"image size {self.image_size} is not divisible by stride {self.stride}")
        if self.d % 4:
            raise ValueError(f"d={self.d} must be divisible by 4 for the patch position table")
        if min(self.d, self.d_text, self.layers, self.heads, self.ffn, self.channels) < 1:
            raise ValueError("model dimensions must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class Model:
    """Parameters plus the frozen text side (embedder, query matrix, position bank)."""

    def __init__(self, cfg: ModelConfig, kb: KnowledgeBase, seed: int = 0,
                 entity_translation: bool = True, params: dict[str, Tensor] | None = None):
        cfg.validate()
        self.cfg = cfg
        self.kb = kb
        self.entity_translation = entity_translation
        self.embedder = TextEmbedder(cfg.d_text, cfg.embed_seed)
        self.queries, self.position_bank = build_query_embeddings(kb, self.embedder, entity_translation)
        if params is None:
            params = init_vision_params(cfg.image_size, cfg.channels, cfg.conv_channels, cfg.d,
                                        np.random.default_rng([seed, 101]))
            params.update(init_fusion_params(cfg.d, cfg.d_text, cfg.layers, cfg.heads, cfg.ffn, (cfg.grid, cfg.grid),
                                             np.random.default_rng([seed, 202])))
        self.params = params

    def forward(self, images, queries: np.ndarray | None = None) -> FusionOutput:
        fm = encode_image(images, self.params)
        return fuse(fm, self.queries if queries is None else queries, self.params,
                    self.cfg.heads, self.cfg.self_attention)

    def query_embedding(self, query: int | str) -> np.ndarray:
        """Embedding for an entity id (honouring entity translation) or a free-text description."""
        return embed_entity(query, self.kb, self.embedder, self.entity_translation)
