"""Byte-level corpus ingestion and a seeded synthetic corpus generator."""
from __future__ import annotations

from pathlib import Path
from typing import Iterator

import numpy as np

VOCAB_SIZE = 256


class IngestionError(ValueError):
    pass


def read_bytes(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw:
        raise IngestionError(f"corpus {path} is empty")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def make_windows(data: np.ndarray, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping (input, target) windows; targets are inputs shifted by one.

    A stream of ``m`` bytes gives ``(m - 1) // seq_len`` windows; the trailing
    partial window is dropped.
    """
    if seq_len < 1:
        raise IngestionError("seq_len must be positive")
    count = (len(data) - 1) // seq_len
    if count == 0:
        raise IngestionError(f"corpus of {len(data)} bytes holds no window of length {seq_len}")
    x = data[: count * seq_len].reshape(count, seq_len)
    y = data[1: count * seq_len + 1].reshape(count, seq_len)
    return x, y


def corpus_ingest(path, seq_len: int, seed: int | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(input_tokens, target_tokens)`` pairs, shuffled when ``seed`` is given."""
    x, y = make_windows(read_bytes(path), seq_len)
    order = np.arange(len(x))
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(x))
    for i in order:
        yield x[i], y[i]


def split_windows(x: np.ndarray, y: np.ndarray, heldout_fraction: float):
    """Hold out the trailing windows (no overlap with the training stream)."""
    n_held = max(1, int(round(len(x) * heldout_fraction)))
    if n_held >= len(x):
        raise IngestionError("held-out split leaves no training windows")
    return (x[:-n_held], y[:-n_held]), (x[-n_held:], y[-n_held:])


# -- synthetic corpus ---------------------------------------------------------
# Several line types with distinct byte statistics, so a router has
# something to specialise on.

_SUBJECTS = ["the cat", "a small dog", "my neighbour", "the old sailor", "every student", "the river",
             "a quiet engineer", "the north wind", "our teacher", "the baker"]
_VERBS = ["watches", "follows", "paints", "remembers", "builds", "carries", "finds", "answers", "likes", "opens"]
_OBJECTS = ["the red door", "a long letter", "the garden wall", "seven apples", "the morning train",
            "a wooden boat", "the last page", "an empty cup", "the bright lamp", "a heavy stone"]
_ADVERBS = ["slowly", "again", "at noon", "without a word", "in the rain", "every day", "with care", "twice"]
_KEYS = ["width", "height", "depth", "timeout", "retries", "port", "level", "ratio", "count", "offset"]
_NAMES = ["alpha", "beta", "gamma", "delta", "omega", "sigma", "kappa", "theta"]


def _sentence(rng: np.random.Generator) -> str:
    s = f"{rng.choice(_SUBJECTS)} {rng.choice(_VERBS)} {rng.choice(_OBJECTS)}"
    if rng.random() < 0.6:
        s += f" {rng.choice(_ADVERBS)}"
    return s[0].upper() + s[1:] + "."


def _arithmetic(rng: np.random.Generator) -> str:
    a, b = int(rng.integers(0, 100)), int(rng.integers(0, 100))
    if rng.random() < 0.5:
        return f"{a} + {b} = {a + b}"
    a, b = max(a, b), min(a, b)
    return f"{a} - {b} = {a - b}"


def _config_line(rng: np.random.Generator) -> str:
    return f"{rng.choice(_NAMES)}.{rng.choice(_KEYS)} = {int(rng.integers(0, 1000))};"


def _code_line(rng: np.random.Generator) -> str:
    f, v = rng.choice(_NAMES), rng.choice(_KEYS)
    return f"def {f}_{v}(x): return x * {int(rng.integers(2, 10))}"


def synthetic_text(n_bytes: int, seed: int = 0) -> bytes:
    """Deterministic mixed-register text of exactly ``n_bytes`` bytes."""
    rng = np.random.default_rng(seed)
    makers = [_sentence, _arithmetic, _config_line, _code_line]
    out: list[str] = []
    size = 0
    while size < n_bytes:
        maker = makers[int(rng.integers(0, len(makers)))]
        lines = [maker(rng) for _ in range(int(rng.integers(2, 6)))]
        para = "\n".join(lines) + "\n\n"
        out.append(para)
        size += len(para)
    return "".join(out).encode("ascii")[:n_bytes]
