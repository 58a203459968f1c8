"""slimkit: training-free, activation-guided structural compression of
transformer weight groups (query-key, value-output, gated feed-forward)."""

__version__ = "0.1.0"
