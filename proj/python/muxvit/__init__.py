from muxvit._core import *  # noqa: F401,F403
from muxvit._core import __version__  # noqa: F401
