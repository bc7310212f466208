"""Index-free two-stage retrieval: target-aware generator, MIPS, cross-attention ranker."""

__version__ = "0.1.0"
