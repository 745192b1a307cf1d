"""Stable hash buckets for trainable token and address embeddings."""
from __future__ import annotations

import hashlib
from collections import Counter
from functools import lru_cache

import numpy as np


@lru_cache(maxsize=1 << 16)
def bucket(token: str, n_buckets: int, salt: str = "") -> int:
    digest = hashlib.blake2b((salt + token).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") % n_buckets


def pad_ids(rows: list[list[int]], min_len: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id lists into an int matrix plus boolean mask."""
    width = max([min_len] + [len(r) for r in rows])
    ids = np.zeros((len(rows), width), dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
        mask[i, : len(r)] = True
    return ids, mask


def pad_bags(rows: list[list[int]], min_len: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Like ``pad_ids`` but each row becomes its sorted distinct ids weighted by count / length.

    A weighted mean over the result equals the plain mean, and repeating a row's
    ids any number of times gives bit-identical ids and weights.
    """
    bags = [sorted(Counter(r).items()) for r in rows]
    width = max([min_len] + [len(b) for b in bags])
    ids = np.zeros((len(rows), width), dtype=np.int64)
    weights = np.zeros((len(rows), width))
    for i, (r, b) in enumerate(zip(rows, bags)):
        ids[i, : len(b)] = [t for t, _ in b]
        weights[i, : len(b)] = [c / len(r) for _, c in b]
    return ids, weights
