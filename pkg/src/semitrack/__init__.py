"""Semi-supervised instance tracking on grid-cell embeddings.

Instance-contrastive embedding losses with a maximum-entropy regularizer,
cycle-consistent correspondence learning on unlabeled video, an online
memory-bank tracker, video AP / CLEAR-MOT metrics and a synthetic benchmark.
"""
__version__ = "0.1.0"
