"""Semantics-first log parsing.

A trainable miner labels log tokens as concepts or instances and matches
them into pairs; a joint parser resolves implicit pairs against an
accumulated knowledge base and emits conceptualized templates; session
classifiers consume the mined semantics for anomaly detection and
failure diagnosis.
"""

__version__ = "0.1.0"
