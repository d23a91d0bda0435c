"""Bayes-by-Backprop convolution with the local reparameterisation trick.

The variational posterior of every kernel weight is ``N(mu, alpha * mu**2)``;
``alpha`` is kept positive through a softplus of a free parameter.
"""

import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import InvalidArgument

VAR_FLOOR = 1e-8
# keeps the root differentiable where the output variance vanishes exactly
# (zero padding, dead ReLU inputs)
_STD_EPS = 1e-16


def softplus_inverse(y):
    return math.log(math.expm1(y))


def bbb_conv_forward(inputs, mu, alpha, stride=1, padding=0, generator=None, eps=None):
    """``A*mu + eps * sqrt(A**2 * (alpha*mu**2))``, no bias.

    ``eps`` may be supplied explicitly (same shape as the output); otherwise it
    is drawn from ``generator``.
    """
    if inputs.dim() != 4 or inputs.shape[1] != mu.shape[1]:
        raise InvalidArgument(
            f"input channels {tuple(inputs.shape)} incompatible with kernel {tuple(mu.shape)}"
        )
    mean = F.conv2d(inputs, mu, stride=stride, padding=padding)
    var = F.conv2d(inputs * inputs, alpha * mu * mu, stride=stride, padding=padding)
    std = torch.sqrt(var.clamp_min(0.0) + _STD_EPS)
    if eps is None:
        eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype, device=mean.device)
    elif eps.shape != mean.shape:
        raise InvalidArgument(f"eps shape {tuple(eps.shape)} != output shape {tuple(mean.shape)}")
    return mean + eps * std


def layer_kl(mu, alpha, prior_sigma):
    """Closed-form KL(N(mu, alpha mu^2) || N(0, prior_sigma^2)) summed over weights."""
    if prior_sigma <= 0:
        raise InvalidArgument("prior_sigma must be positive")
    var = (alpha * mu * mu).clamp_min(VAR_FLOOR)
    ps2 = float(prior_sigma) ** 2
    return 0.5 * torch.sum((var + mu * mu) / ps2 - 1.0 - torch.log(var) + math.log(ps2))


class BBBConv2d(nn.Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, alpha_init=0.1):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.mu = nn.Parameter(torch.empty(shape))
        self.raw_alpha = nn.Parameter(torch.empty(shape))
        self.alpha_init = alpha_init
        self.reset_parameters()

    def reset_parameters(self, generator=None):
        fan_in = self.in_channels * self.kernel_size ** 2
        with torch.no_grad():
            self.mu.normal_(0.0, math.sqrt(2.0 / fan_in), generator=generator)
            self.raw_alpha.fill_(softplus_inverse(self.alpha_init))

    @property
    def alpha(self):
        return F.softplus(self.raw_alpha)

    def forward(self, x, generator=None, sample=True):
        if not sample:
            return F.conv2d(x, self.mu, stride=self.stride, padding=self.padding)
        return bbb_conv_forward(x, self.mu, self.alpha, self.stride, self.padding, generator=generator)

    def kl(self, prior_sigma):
        return layer_kl(self.mu, self.alpha, prior_sigma)

    def extra_repr(self):
        return (
            f"{self.in_channels}, {self.out_channels}, kernel_size={self.kernel_size}, "
            f"stride={self.stride}, padding={self.padding}"
        )
