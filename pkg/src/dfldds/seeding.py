"""Derivation of named, independent RNG substreams from one master seed.

Every stochastic component of a simulation (topology, fleet placement, data
generation, each vehicle's training shuffle) draws from its own named stream,
so adding or reordering consumers of one stream can never perturb another.
"""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master_seed: int, label: str) -> int:
    """Return a stable 64-bit seed for the substream named ``label``."""
    digest = hashlib.sha256(f"{master_seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def substream(master_seed: int, label: str) -> np.random.Generator:
    """Return an independent generator for the substream named ``label``."""
    return np.random.default_rng(derive_seed(master_seed, label))
