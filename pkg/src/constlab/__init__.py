"""constlab: cross-modal contrastive learning for end-to-end speech translation, at desk scale.

A numpy autodiff engine, a small speech/text Transformer, the contrastive and
multi-task objectives, hard-example augmentations, a synthetic corpus, a
training loop and evaluation tools, all driven by the ``constlab`` CLI.
"""

__version__ = "0.1.0"
