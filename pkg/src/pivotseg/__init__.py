"""Highlight segmentation of long utterance sequences with a pivot-attention encoder.

The package is self-contained on top of numpy: a small reverse-mode tape
(:mod:`pivotseg.autograd`), layers (:mod:`pivotseg.nn`), the encoder and
heads (:mod:`pivotseg.model`), span decoding (:mod:`pivotseg.decoding`),
evaluation (:mod:`pivotseg.metrics`), data files and a synthetic generator
(:mod:`pivotseg.data`), and the ``pivotseg`` command line (:mod:`pivotseg.cli`).
"""

__version__ = "0.1.0"
