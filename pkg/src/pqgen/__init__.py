"""pqgen: a desk-scale seq2seq engine for diverse product question generation.

From-scratch reverse-mode autodiff, a miniature transformer encoder-decoder,
diversity-regularized pairwise training, diverse beam search, and the metric
suite to measure relevance and diversity. numpy is the only runtime
dependency.
"""

__version__ = "0.1.0"
