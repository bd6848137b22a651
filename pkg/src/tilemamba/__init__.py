"""tilemamba: ultra-light ConvNeXt + parallel-Mamba tile classifier.

A compact image classifier built on a minimal numpy autodiff engine:
ConvNeXt blocks for shallow features, parallel selective-state-space
(Mamba) layers for context, a spatial/channel attention bridge, and a
fixed non-negative orthogonal classifier head. Ships with a trainer,
synthetic tile data, diagnostics (parameter audit, gradient checks,
neural-collapse metrics, Grad-CAM) and a CLI.
"""

from .tensor import Tensor, RngStream, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "RngStream", "no_grad", "__version__"]
