"""CT slice classification: patient-disjoint splits, Gaussian/geometric
preprocessing, CycleGAN cross-class augmentation, two-stage fine-tuning and
repeated-run evaluation."""

__version__ = "0.1.0"
