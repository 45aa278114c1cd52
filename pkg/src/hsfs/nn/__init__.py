"""From-scratch numpy neural network engine."""

from hsfs.nn.gradcheck import GradCheckReport, grad_check
from hsfs.nn.layers import Conv2D, Dense, Dropout, MaxPool2, ReLU, Softmax, Upsample2
from hsfs.nn.losses import cross_entropy, loss, mse
from hsfs.nn.network import Activations, Network
from hsfs.nn.optim import Adadelta, Adam, Optimizer, make_optimizer

__all__ = [
    "Activations", "Adadelta", "Adam", "Conv2D", "Dense", "Dropout", "GradCheckReport",
    "MaxPool2", "Network", "Optimizer", "ReLU", "Softmax", "Upsample2", "cross_entropy",
    "grad_check", "loss", "make_optimizer", "mse",
]
