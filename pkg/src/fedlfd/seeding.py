"""Seed splitting.

Every random stream in a run is keyed by ``(master_seed, entity_kind,
entity_id, round)`` and hashed with BLAKE2b to a 64-bit seed. Streams never
share state, so work items can run in any order or on any number of workers
and still draw identical numbers.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master_seed: int, kind: str, entity_id: int | str = 0, round_idx: int = -1) -> int:
    key = f"{int(master_seed)}|{kind}|{entity_id}|{int(round_idx)}".encode("utf-8")
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def rng_for(master_seed: int, kind: str, entity_id: int | str = 0, round_idx: int = -1) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, kind, entity_id, round_idx))
