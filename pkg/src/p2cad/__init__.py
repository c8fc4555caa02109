"""Point cloud to CAD command sequence reconstruction, in numpy.

Modules: ``cad_lang`` (command language and tokens), ``geometry``
(execution, sampling, chamfer distance), ``autodiff`` (reverse-mode
tensors and Adam), ``network`` (extractor, decoders, heads), ``trainer``
(losses, metrics, synthetic data, training loop) and ``cli``.
"""

__version__ = "0.1.0"
