"""Datasets, file formats, batching and augmentation."""

from .augment import add_noise, random_hflip, random_resized_crop
from .batching import Batch, make_batches
from .dataset import MCDataset, MCImage, channel_stats
from .formats import (
    checkpoint_from_bytes,
    checkpoint_to_bytes,
    dataset_from_bytes,
    dataset_to_bytes,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    save_dataset,
)
from .synthetic import SyntheticSpec, generate_synthetic, render, split_label

__all__ = [
    "Batch", "MCDataset", "MCImage", "SyntheticSpec", "add_noise", "channel_stats",
    "checkpoint_from_bytes", "checkpoint_to_bytes", "dataset_from_bytes", "dataset_to_bytes",
    "generate_synthetic", "load_checkpoint", "load_dataset", "make_batches", "random_hflip",
    "random_resized_crop", "render", "save_checkpoint", "save_dataset", "split_label",
]
