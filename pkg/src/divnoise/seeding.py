"""Deterministic seed derivation.

Every run holds a single root seed; each randomized subsystem (corruption,
split, training, sampling, ...) derives its own stream from the root with a
stable label so adding or reordering subsystems never perturbs the others.
"""

import hashlib


def derive_seed(root_seed: int, label: str) -> int:
    """Derive a 63-bit child seed from ``root_seed`` for the given label.

    The derivation hashes ``"<root>:<label>"`` with SHA-256 and keeps the top
    eight bytes, so distinct labels give statistically independent streams and
    the mapping is identical across platforms and sessions.
    """
    digest = hashlib.sha256(f"{root_seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF
