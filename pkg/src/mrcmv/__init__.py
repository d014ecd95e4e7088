"""Retrieve background music for a video from its frames and voice-over.

Two branches map (video, voice-over) and BGM feature sequences into one
unit-sphere embedding space; retrieval is nearest-neighbour search there.
Everything runs on numpy with a small reverse-mode autodiff in
:mod:`mrcmv.numerics`.
"""
from .model import ModelConfig, ModelParameters, bgm_embed, joint_embed, load_checkpoint, save_checkpoint
from .retrieval import EmbeddingIndex, evaluate, rank_candidates, recall_at_k
from .trainer import TrainConfig, init_parameters, train

__all__ = [
    "ModelConfig", "ModelParameters", "bgm_embed", "joint_embed", "load_checkpoint", "save_checkpoint",
    "EmbeddingIndex", "evaluate", "rank_candidates", "recall_at_k",
    "TrainConfig", "init_parameters", "train",
]
__version__ = "0.1.0"
