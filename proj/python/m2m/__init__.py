"""Multi-scale multi-expert neural PDE surrogate toolkit."""

from m2m._core import *  # noqa: F401,F403
from m2m._core import __version__  # noqa: F401
