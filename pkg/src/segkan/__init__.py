"""3D segmentation with a Fourier KAN convolution embedding and a gated
recurrent cell over the patch sequence, on a float64 autodiff engine."""

from .diffengine import Array, backward, grad_check, no_grad
from .net import SegKanModel, ModelConfig, dice_score, forward, soft_dice_loss

__version__ = "0.1.0"
