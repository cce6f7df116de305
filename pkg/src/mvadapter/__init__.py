"""Adaptive channel attention at desk scale.

A small, fully testable stack: a dense-tensor core with reverse-mode
automatic differentiation, the gated channel-attention blocks built from
it, COCO-convention instance-segmentation metrics, a deterministic
synthetic underwater scene generator, and a toy training harness that
demonstrates the attention mechanism end to end.
"""

from importlib import import_module

__version__ = "0.1.0"

_SUBMODULES = ("tensor", "ops", "attention", "metrics", "synthetic", "training", "cli")


def __getattr__(name):
    # Submodules import lazily so the CLI can apply MVA_THREADS before
    # numpy spins up its thread pools.
    if name in _SUBMODULES:
        module = import_module(f"{__name__}.{name}")
        globals()[name] = module
        return module
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
