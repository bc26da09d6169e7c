"""Small dual-number autodiff stack: layers, residual U-Net, Adam."""
from .layers import (Add, BatchNorm, Concat, Conv1x1, Conv3x3, Layer, MaxPool2, ReLU, TConv2x2s2,
                     check_tensor)
from .network import (Network, Tape, backward, build_mini_unet, build_sequential, jvp, load_checkpoint,
                      save_checkpoint, second_order_param_grad, unet_param_count)
from .optim import AdamState, adam_init, adam_step, piecewise_lr

__all__ = [
    "Add", "BatchNorm", "Concat", "Conv1x1", "Conv3x3", "Layer", "MaxPool2", "ReLU", "TConv2x2s2",
    "check_tensor", "Network", "Tape", "backward", "build_mini_unet", "build_sequential", "jvp",
    "load_checkpoint", "save_checkpoint", "second_order_param_grad", "unet_param_count", "AdamState",
    "adam_init", "adam_step", "piecewise_lr",
]
