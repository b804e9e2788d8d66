"""Trace-driven simulator for heterogeneous KV-cache compression.

Profiles attention heads from recorded top-k traces, classifies them into
volatile / anchor / pivot / satellite roles, allocates per-head cache budgets
inversely to stability, and replays decoding against a two-tier (GPU + CPU)
cache with drift-triggered retrieval.
"""

__version__ = "0.1.0"
