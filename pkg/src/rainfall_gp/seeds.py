"""Deterministic seed splitting for replicates, chains and forecast streams."""

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def derive_seed(master: int, *indices: int) -> int:
    """Child seed for ``master`` and a path of indices: ``mix(mix(master + i0) + i1) ...``."""
    s = splitmix64(int(master) & MASK64)
    for i in indices:
        s = splitmix64((s + int(i)) & MASK64)
    return s
