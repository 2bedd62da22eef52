"""Entity-query vision-language alignment with knowledge-base descriptions.

Images are encoded into a patch grid; entity descriptions from a knowledge
base act as decoder queries that predict existence and position and yield
grounding heatmaps.  Unseen entities are queried by description alone.
"""
from .autodiff import NonFiniteError, ShapeError, Tensor, no_grad
from .checkpoint import Checkpoint
from .config import RunConfig, preset
from .inference import classify, evaluate, ground, predict
from .knowledge import KnowledgeBase, TextEmbedder
from .model import Model, ModelConfig
from .reports import ExistLabel, Report, ReportGrammar, Triplet, extract_triplets, parse_report
from .training import TrainConfig, train
from .world import WorldSpec, generate_dataset, split

__all__ = [
    "Checkpoint", "ExistLabel", "KnowledgeBase", "Model", "ModelConfig", "NonFiniteError",
    "Report", "ReportGrammar", "RunConfig", "ShapeError", "Tensor", "TextEmbedder",
    "TrainConfig", "Triplet", "WorldSpec", "classify", "evaluate", "extract_triplets",
    "generate_dataset", "ground", "no_grad", "parse_report", "predict", "preset", "split",
    "train",
]
__version__ = "0.1.0"
