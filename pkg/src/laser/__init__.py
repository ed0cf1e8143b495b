"""Off-policy actor-critic with replay, V-trace and trust-region estimators on tabular MDPs."""

__version__ = "0.1.0"
