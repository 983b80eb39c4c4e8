from .core import *  # noqa
__version__ = "0.1.0"
