"""Inception-Mamba segmentation network on a small numpy autodiff core.

Layers: :mod:`tensor_core` (ops + tape), :mod:`ssm` (selective scan, Mamba
block), :mod:`blocks` (IMM, FCM, bottleneck, decoder, backbone), :mod:`model`
(config, parameters, checkpoints), :mod:`training`, :mod:`metrics`,
:mod:`data`, :mod:`accounting` and :mod:`cli`.
"""
from .model import ModelConfig, ablation_config, init_params, model_forward, toy_config
from .training import TrainPlan, fit

__all__ = ["ModelConfig", "TrainPlan", "ablation_config", "fit", "init_params", "model_forward", "toy_config"]
__version__ = "0.1.0"
