"""Counter-based random streams, one per replica."""
import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    z = (int(x) + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def stream_key(seed: int, replica: int = 0) -> int:
    """Key of replica r: seed xor splitmix64(r)."""
    return (int(seed) & _MASK) ^ splitmix64(replica)


def replica_generator(seed: int, replica: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key(seed, replica)))
