"""Speaker-verification toolkit.

End-to-end pipeline: filterbank features -> TDNN embedding extractor ->
two-covariance PLDA back-end -> restricted trial generation -> EER/DET
evaluation with score fusion. Every stage is deterministic given its seed
and verifiable on synthetic data.
"""

__version__ = "0.1.0"
