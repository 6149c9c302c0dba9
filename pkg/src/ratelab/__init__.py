"""ratelab: a desk-scale rate-control laboratory.

Surrogate two-pass encoder environment, heuristic VBR baseline,
evolution-strategies teachers, imitation-learned neural QP policies with
inference-time truncation and feedback control, and rate-distortion
comparison metrics.
"""

__version__ = "0.1.0"
