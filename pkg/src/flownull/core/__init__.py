"""Numerical substrate: autodiff tensors, unitary FFT, Adam, FNT1 files."""

from flownull.core.fft import UnsupportedSizeError, fft2, ifft2
from flownull.core.linalg import rand_orthogonal
from flownull.core.optim import Adam, AdamState, adam_step
from flownull.core.tensor import PoisonedGradientError, Tape, Tensor, backward

__all__ = [
    "Adam", "AdamState", "PoisonedGradientError", "Tape", "Tensor",
    "UnsupportedSizeError", "adam_step", "backward", "fft2", "ifft2",
    "rand_orthogonal",
]
