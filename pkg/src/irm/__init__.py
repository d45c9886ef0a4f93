"""Intrinsic reward matching: pick pretrained skills for a new task by comparing rewards.

Modules:
    autodiff        reverse-mode differentiation and small MLPs
    epic            EPIC canonicalization and Pearson distance
    discriminators  contrastive and predictive skill discriminators
    planar          the 2D point environment and scripted skill policies
    selection       IRM optimizers and interaction-based baselines
    sequencing      multi-reward horizon partitioning and sequential selection
    experiments     seeded experiment harness behind the ``irm`` command
"""

__version__ = "0.1.0"
