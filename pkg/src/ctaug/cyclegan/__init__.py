"""Unpaired normal <-> covid slice translation used for data augmentation."""

from .augment import generate_augmented_set
from .losses import CycleGanLossWeights, adversarial_loss, cycle_loss, identity_loss
from .model import (
    CycleGanModel,
    CycleGanOptim,
    ReplayBuffer,
    fit,
    generator_losses,
    load_checkpoint,
    save_checkpoint,
    train_step,
    translate,
)
from .networks import DiscriminatorSpec, Generator, GeneratorSpec, PatchDiscriminator, patch_grid_dim

__all__ = [
    "CycleGanLossWeights", "CycleGanModel", "CycleGanOptim", "DiscriminatorSpec", "Generator",
    "GeneratorSpec", "PatchDiscriminator", "ReplayBuffer", "adversarial_loss", "cycle_loss", "fit",
    "generate_augmented_set", "generator_losses", "identity_loss", "load_checkpoint", "patch_grid_dim",
    "save_checkpoint", "train_step", "translate",
]
