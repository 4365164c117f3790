"""Scheduling, frame skipping and retrieval for real-time img2img video pipelines."""

from .core import EmbeddingVector, FlowField, FrameImage, InvalidArgument, LatentTensor, Seed

__version__ = "0.1.0"

__all__ = ["EmbeddingVector", "FlowField", "FrameImage", "InvalidArgument", "LatentTensor", "Seed"]
