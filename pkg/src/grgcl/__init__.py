"""Graph recommenders as single-view graph contrastive learners.

Trains LightGCN-style encoders with BPR or COLES objectives and audits the
bounds that relate the two losses.
"""

__version__ = "0.1.0"
