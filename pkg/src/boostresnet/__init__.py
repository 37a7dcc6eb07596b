"""BoostResNet: train residual networks block by block with telescoping-sum boosting."""

__version__ = "0.1.0"
