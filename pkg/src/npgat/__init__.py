"""Nuclei segmentation on multi-magnification graphs with learnable node positions.

An image patch becomes a pyramid of grid graphs (one level per magnification).
Coarse nodes can move and resize their footprints through a small mutation
network, a graph attention network predicts foreground per node, and a
focal loss weighted by node position drives training. Everything runs on a
small numpy autodiff tape.
"""
from .autodiff import Tape, Tensor, finite_difference_check
from .data import Sample, build_node_targets, reconstruct_mask, synth_generate
from .gat import GatModel, ModelConfig, init_model, network_forward
from .graph import MagnificationGraph, build_base_graph, graph_from_image, project_features
from .losses import FocalParams, bce, focal_loss, loss_field_weight, magnification_balanced_focal
from .metrics import competition_score, dice_f1, evaluate_masks, soft_iou
from .neuroplastic import MutationConfig, MutationNet, enforce_constraints, mutate_positions, refresh_features
from .trainer import TrainConfig, Trainer, evaluate, train

__version__ = "0.1.0"
