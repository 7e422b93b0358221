"""Dynamic individual risk prediction from repeated markers.

Pipeline: landmark filtering of longitudinal + survival data, mixed-model
trajectory summarization, survival machine-learning methods (Cox, penalized
Cox, sparse PLS on deviance residuals, random survival forests), censoring-
aware evaluation, and a Brier-minimizing superlearner.
"""

__version__ = "0.1.0"
