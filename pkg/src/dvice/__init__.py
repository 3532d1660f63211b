"""Few-shot co-segmentation with a directed variational cross-encoder.

Modules: ``numerics`` (tensors, autodiff, SGD), ``attention`` (channel and
spatial attention), ``model`` (encoder, prototype, decoder, loss),
``episodes`` (class-agnostic episodic sampling), ``synthdata`` (synthetic
corpus), ``metrics``, ``trainer`` and ``cli``.
"""

__version__ = "0.1.0"
