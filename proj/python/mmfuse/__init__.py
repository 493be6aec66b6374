"""Image + EHR fusion models, data formats, metrics and the command line."""

from ._mmfuse import *  # noqa: F401,F403
