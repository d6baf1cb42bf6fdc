"""jitterlu: loop-unrolled inverse-problem solvers with jittered training."""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor
from .linops import ConvolutionalToeplitz, DenseMatrix, Identity, ricker_wavelet
from .nets import Dncnn1dArch, GradientNet, MlpArch, lipschitz_estimate
from .schemes import Adam, TrainingScheme, train
from .unroll import (JitterSchedule, Trajectory, UnrollConfig, UnrolledSolver,
                     gd_unroll, pgd_unroll, reconstruct)

__all__ = [
    "Tape", "Tensor", "Identity", "DenseMatrix", "ConvolutionalToeplitz",
    "ricker_wavelet", "GradientNet", "MlpArch", "Dncnn1dArch", "lipschitz_estimate",
    "Adam", "TrainingScheme", "train", "JitterSchedule", "Trajectory", "UnrollConfig",
    "UnrolledSolver", "gd_unroll", "pgd_unroll", "reconstruct",
]
