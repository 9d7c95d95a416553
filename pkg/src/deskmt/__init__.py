"""deskmt: a desk-scale neural machine translation research harness.

Everything runs on synthetic translation tasks small enough that exact
enumeration, finite-difference checks, and paired-seed experiments
finish in seconds, while the algorithms themselves (dual learning,
joint training of four directed models, deliberation networks, data
refinement, k-best reranking, and direct-assessment evaluation) keep
their full-scale shape.
"""

__version__ = "0.1.0"
