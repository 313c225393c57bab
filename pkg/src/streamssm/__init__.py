"""Streaming video backbone built from selective state space blocks.

Submodules:

* :mod:`streamssm.ssm`: discretization and reference scans.
* :mod:`streamssm.blocks`: causal and bidirectional Mamba blocks.
* :mod:`streamssm.backbone`: patch embedding plus spatial and temporal stages.
* :mod:`streamssm.streaming`: per-frame inference with a carried state.
* :mod:`streamssm.pretrain`: masked reconstruction with teacher alignment.
* :mod:`streamssm.bench`, :mod:`streamssm.verify`, :mod:`streamssm.cli`: tooling.
"""

from streamssm.kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
