"""Standalone writer for the trace file format (version 1).

The layout is specified in the consumer toolkit's docs/formats.md; this
module implements it independently so the file itself stays the only
coupling between exporter and analyzer. Any layout change must bump
TRACE_VERSION in both places.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np

TRACE_MAGIC = b"VDGDTRCE"
TRACE_VERSION = 1
_FLAG_SPARSE = 0x01


def top_m_entries(probs: np.ndarray, top_m: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Highest-probability entries (ties to the lowest token id) plus the
    leftover mass."""
    m = min(top_m, probs.size)
    order = np.argsort(-probs, kind="stable")[:m]
    if m < probs.size:
        order = order[probs[order] > 0]
    kept = probs[order].astype(np.float64)
    residual = max(0.0, 1.0 - float(kept.sum()))
    return order.astype(np.int64), kept, residual


def write_trace_file(
    path: str | Path,
    tokens: Sequence[int],
    distributions: Sequence[np.ndarray],
    vocab_size: int,
    tokenizer_id: str,
    top_m: int | None,
) -> None:
    """Serialize one recorded session. ``top_m`` of None writes dense records."""
    if len(tokens) != len(distributions):
        raise ValueError("tokens and distributions must align one-to-one")
    sparse = top_m is not None
    tok_bytes = tokenizer_id.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(TRACE_MAGIC)
        fh.write(struct.pack("<HIB", TRACE_VERSION, vocab_size, _FLAG_SPARSE if sparse else 0))
        fh.write(struct.pack("<H", len(tok_bytes)))
        fh.write(tok_bytes)
        fh.write(struct.pack("<I", len(tokens)))
        for position, (token, probs) in enumerate(zip(tokens, distributions), start=1):
            probs = np.asarray(probs, dtype=np.float64)
            if probs.shape != (vocab_size,):
                raise ValueError(f"record {position}: expected {vocab_size} probabilities")
            if sparse:
                ids, kept, residual = top_m_entries(probs, top_m)
                payload = struct.pack("<III", position, int(token), ids.size)
                payload += ids.astype("<u4").tobytes()
                payload += kept.astype("<f8").tobytes()
                payload += struct.pack("<d", residual)
            else:
                payload = struct.pack("<II", position, int(token))
                payload += probs.astype("<f8").tobytes()
            fh.write(struct.pack("<I", len(payload)))
            fh.write(payload)
