import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator from a 64-bit seed."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def derive_seed(seed: int, *tags) -> int:
    """Stable child seed for a (seed, tag...) path."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF] + [_tag(t) for t in tags])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _tag(t) -> int:
    if isinstance(t, int):
        return t & 0xFFFFFFFF
    h = 2166136261
    for ch in str(t).encode():
        h = ((h ^ ch) * 16777619) & 0xFFFFFFFF
    return h
