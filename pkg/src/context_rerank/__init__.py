"""Context-aware person retrieval re-ranking.

Pipeline: part-based similarity (uniform or relative-attention fusion),
top-K contextual instance expansion, and a star-graph GCN that scores
probe-gallery pairs; plus a synthetic benchmark generator and mAP/top-1
evaluation harness.
"""

__version__ = "0.1.0"
