"""Particle filtering with a conditional normalizing-flow observation model."""

from ._nfpf import *  # noqa: F401,F403
from ._nfpf import __doc__  # noqa: F401
