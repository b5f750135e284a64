"""Frozen-backbone decoder heads on a synthetic land-atmosphere world.

Submodules: ``tensor_core`` (grids, masks, tensor files), ``synthworld``
(the generator), ``transforms``, ``backbone``, ``heads``, ``trainer``,
``metrics``, ``evaluate``, ``config`` and ``cli``.
"""

__version__ = "0.1.0"
