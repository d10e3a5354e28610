"""Simultaneous identification of a lifted bilinear model and a neural
control barrier function for an unknown control-affine system, with a
QP safety filter driving the plant to a goal."""

from . import cbf_train, cli, falsifier, koopman, netcore, plant, safectrl

__all__ = ["cbf_train", "cli", "falsifier", "koopman", "netcore", "plant",
           "safectrl"]
__version__ = "0.1.0"
