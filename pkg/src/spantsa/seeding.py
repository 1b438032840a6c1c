"""Subsystem seeds derived from one user-facing seed."""

import hashlib


def derive_seed(seed: int, name: str) -> int:
    """First 8 bytes (little-endian) of sha256("<seed>/<name>")."""
    digest = hashlib.sha256(f"{seed}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")
