"""Trust-governed multi-agent coordination: metrics, policy, governance node, ledgers."""

__version__ = "0.1.0"
