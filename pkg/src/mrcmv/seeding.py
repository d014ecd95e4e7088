"""Labelled seed derivation so each subsystem draws from its own stream."""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, label))
