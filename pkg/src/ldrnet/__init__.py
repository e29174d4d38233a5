"""Document localization: corner and border-point regression with a from-scratch numpy engine.

Submodules: ``geometry``, ``numerics`` (autodiff engine), ``model``, ``loss``,
``data``, ``train``, ``evaluate`` and ``cli``. Nothing heavy is imported
here so that the CLI can pin thread counts before numpy loads.
"""
__version__ = "0.1.0"
__all__ = ["geometry", "numerics", "model", "loss", "data", "train", "evaluate", "cli"]
