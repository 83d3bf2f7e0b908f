"""Deterministic seed derivation for independent RNG streams."""

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One step of the splitmix64 mixer; a bijection, so distinct inputs stay distinct."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) & _MASK


def derive_seed(base: int, *path: int) -> int:
    """Child seed for a labeled purpose, e.g. derive_seed(root, member, stream)."""
    state = base & _MASK
    for step in path:
        state = splitmix64(state ^ (step & _MASK))
    return splitmix64(state)
