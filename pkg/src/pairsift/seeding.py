"""Deterministic, named random streams derived from a single master seed.

Every stochastic component of the library draws from a stream obtained by
hashing a master seed together with a tuple of string/int labels.  Streams
are therefore independent of iteration order, stable across processes, and
unaffected by adding new consumers with different labels.

Stream labels used across the package (documented here so replay oracles
can rebuild them):

- ``("walk", <node token>, <walk index>)``          random-walk steps
- ``("neg", <positive index>)``                     negative-edge corruption
- ``("init", <parameter name>)``                    weight initialisation
- ``("pretrain-neg", <epoch>)``                     per-epoch negative resampling
- ``("pretrain-shuffle", <epoch>)``                 per-epoch edge shuffling
- ``("dropout", <call index>, <epoch>)``            fine-tuning dropout masks
- ``("round0",)``                                   initial random batch
- ``("acquire", <round>)``                          acquisition tie-breaking
- ``("member", <member index>)``                    per-member training seed
- ``("latent", <node kind>)``, ``("edges", <relation>)``,
  ``("core",)``, ``("noise",)``                     synthetic-world sampling
- ``("world",)``, ``("walks",)``,
  ``("member-init", <replicate>, <member>)``,
  ``("pretrain", <replicate>, <member>)``,
  ``("loop", <strategy>, <ablation>, <replicate>)`` experiment orchestration
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["child_seed", "stream"]


def child_seed(master: int, *labels) -> int:
    """Derive a 64-bit child seed from ``master`` and a label path.

    Labels must be ints or strings; the derivation is a SHA-256 hash of the
    decimal master seed followed by the ``repr`` of each label, separated by
    0x1f bytes.  The first 8 digest bytes, little-endian, form the child.
    """
    h = hashlib.sha256()
    h.update(str(int(master)).encode())
    for lab in labels:
        if not isinstance(lab, (int, str, np.integer)):
            raise TypeError(f"stream labels must be int or str, got {type(lab).__name__}")
        h.update(b"\x1f" + repr(int(lab) if isinstance(lab, np.integer) else lab).encode())
    return int.from_bytes(h.digest()[:8], "little")


def stream(master: int, *labels) -> np.random.Generator:
    """Return a counter-based (Philox) generator for the named stream."""
    return np.random.Generator(np.random.Philox(child_seed(master, *labels)))
