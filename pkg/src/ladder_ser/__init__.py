"""Semi-supervised ladder networks for emotional attribute regression."""

from ladder_ser.numerics import RngStream, matmul, sample_gaussian
from ladder_ser.metrics import ccc, ccc_loss_and_grad, fisher_z_test, paired_t_test, pearson

__version__ = "0.1.0"

__all__ = [
    "RngStream",
    "ccc",
    "ccc_loss_and_grad",
    "fisher_z_test",
    "matmul",
    "paired_t_test",
    "pearson",
    "sample_gaussian",
]
