"""XD operations: butterfly/Kaleidoscope structured layers with warm-started
architecture search, a minimal reverse-mode autodiff engine, dense verification
oracles, and a CLI (``xdops``)."""

from . import (autodiff, backbone, checkpoint, kaleidoscope, optim, oracles,
               tasks, xd)

__all__ = ["autodiff", "backbone", "checkpoint", "kaleidoscope", "optim",
           "oracles", "tasks", "xd"]

__version__ = "0.1.0"
