"""Synthetic supervision, losses and the optimisation loop."""

from .groundtruth import GroundTruth, cell_anchors, fine_pixel_pairs, gt_from_homography
from .losses import coarse_loss, empty_loss_warnings, fine_loss_stage1, fine_loss_stage2, total_loss
from .loop import LossTerms, SyntheticDataset, TrainConfig, TrainResult, pair_loss, train_loop
from .optim import AdamW
from .synth import WarpJitter, random_homography, synth_pair, texture, warp_image, warp_points

__all__ = [
    "AdamW", "GroundTruth", "LossTerms", "SyntheticDataset", "TrainConfig", "TrainResult", "WarpJitter",
    "cell_anchors", "coarse_loss", "empty_loss_warnings", "fine_loss_stage1", "fine_loss_stage2",
    "fine_pixel_pairs", "gt_from_homography", "pair_loss", "random_homography", "synth_pair", "texture",
    "total_loss", "train_loop", "warp_image", "warp_points",
]
