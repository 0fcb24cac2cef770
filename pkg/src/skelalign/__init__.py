"""Skeleton-sequence action recognition with text-aligned body-part features."""

__version__ = "0.1.0"

from . import (data, encoder, errors, evaluate, gradcheck, graph,  # noqa: F401
               layers, losses, textbank, train)
