"""Seeded random number helpers used by samplers and generators.

All stochastic code in the package draws from PCG64 generators created
here. Dataset generation additionally pins the normal sampler to the
polar Box-Muller method so that fixtures depend only on the PCG64
uniform stream, not on whichever ziggurat variant a numpy release ships.

Stream splitting: ``sequence_streams(seed, n)`` derives one independent
child generator per sequence via ``SeedSequence.spawn``, so sequences can
be generated in any order (or in parallel) without changing their bytes.
"""

import numpy as np


def generator(seed):
    """A PCG64 generator for the given integer seed."""
    return np.random.Generator(np.random.PCG64(seed))


def sequence_streams(seed, n):
    """n independent child generators, one per sequence index."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


def polar_normal(rng, shape):
    """Standard normal draws via the polar (Marsaglia) Box-Muller method.

    Rejection sampling on uniform pairs; consumes a variable number of
    uniforms but is fully determined by the uniform stream.
    """
    size = int(np.prod(shape)) if shape else 1
    out = np.empty(size)
    filled = 0
    while filled < size:
        need = size - filled
        # acceptance rate is pi/4; oversample to usually finish in one pass
        draw = max(int(need * 1.4) + 8, 16)
        u = rng.uniform(-1.0, 1.0, size=draw)
        v = rng.uniform(-1.0, 1.0, size=draw)
        s = u * u + v * v
        ok = (s > 0.0) & (s < 1.0)
        u, v, s = u[ok], v[ok], s[ok]
        factor = np.sqrt(-2.0 * np.log(s) / s)
        pairs = np.empty(2 * u.size)
        pairs[0::2] = u * factor
        pairs[1::2] = v * factor
        take = min(pairs.size, need)
        out[filled : filled + take] = pairs[:take]
        filled += take
    return out.reshape(shape)
