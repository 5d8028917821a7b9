"""Kernel backend selection.

The compiled extension is used when importable.  Setting
``LAYERPAR_BACKEND=python`` forces the numpy fallback.
"""
import os

from . import _pykernels

python = _pykernels

try:
    from . import _kernels as compiled
except ImportError:  # extension not built
    compiled = None

if os.environ.get("LAYERPAR_BACKEND", "").lower() == "python" or compiled is None:
    active = _pykernels
    NAME = "python"
else:
    active = compiled
    NAME = "compiled"


def available():
    """Names of the importable backends."""
    return ["python"] + (["compiled"] if compiled is not None else [])


def get(name):
    if name == "python":
        return _pykernels
    if name == "compiled":
        if compiled is None:
            raise RuntimeError("compiled kernels are not built")
        return compiled
    raise ValueError(f"unknown backend {name!r}")
