"""Shape optimization of a permanent-magnet rotor in 2-D nonlinear magnetostatics."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.0.0"
