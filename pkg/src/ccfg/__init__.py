"""Contrastive fine-grained classification of resembling glyphs.

Modules: ``losses``, ``model``, ``pairs``, ``data``/``synth``, ``training``,
``metrics`` and the ``ccfg`` command line in ``cli``.
"""

__version__ = "0.1.0"
