"""Instance-aware feature aggregation for monocular 3D detection, on a numpy autodiff core.

Kept import-free so ``iafa.cli`` can set thread limits before numpy loads.
"""

__version__ = "0.1.0"
