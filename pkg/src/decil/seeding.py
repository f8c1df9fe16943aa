"""Deterministic seed splitting.

Every random stream in the package is derived from a root seed and a purpose
label, ``derive_seed(root, "train/denoiser")``.  The child seed is the first
8 bytes of ``sha256(f"{root}:{label}")``, so streams are stable across runs,
platforms and the order in which they are requested.
"""

import hashlib

import numpy as np


def derive_seed(root: int, label: str) -> int:
    digest = hashlib.sha256(f"{int(root)}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(root: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, label))
