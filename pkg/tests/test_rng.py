"""Pinned-PRNG checks.

The reference oracle below re-implements splitmix64 and xoshiro256** from
their published definitions in a deliberately plain style, independent of
the package's implementation, and the two are compared draw for draw.
"""

from __future__ import annotations

import numpy as np

from histotype.rng import Xoshiro256StarStar, XoshiroLanes, derive_seed, splitmix64

M64 = 2**64


def ref_splitmix64_stream(seed, count):
    out = []
    x = seed % M64
    for _ in range(count):
        x = (x + 0x9E3779B97F4A7C15) % M64
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) % M64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) % M64
        out.append((z ^ (z >> 31)) % M64)
    return out


def ref_xoshiro_stream(seed, count):
    s = ref_splitmix64_stream(seed, 4)

    def rotl(x, k):
        return ((x << k) | (x >> (64 - k))) % M64

    out = []
    for _ in range(count):
        out.append((rotl((s[1] * 5) % M64, 7) * 9) % M64)
        t = (s[1] << 17) % M64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = rotl(s[3], 45)
    return out


def test_splitmix_matches_reference():
    for seed in (0, 1, 42, 2**63, M64 - 1):
        state = seed
        for expected in ref_splitmix64_stream(seed, 20):
            state, got = splitmix64(state)
            assert got == expected


def test_scalar_xoshiro_matches_reference():
    for seed in (0, 7, 123456789, 2**61 + 5):
        rng = Xoshiro256StarStar(seed)
        for expected in ref_xoshiro_stream(seed, 200):
            assert rng.next_u64() == expected


def test_vector_lanes_match_scalar_generators():
    lanes = XoshiroLanes(seed=99, lanes=8)
    scalars = [
        Xoshiro256StarStar((99 + i * XoshiroLanes.LANE_STRIDE) % M64)
        for i in range(8)
    ]
    for _ in range(50):
        vec = lanes.next_u64()
        for i, rng in enumerate(scalars):
            assert int(vec[i]) == rng.next_u64()


def test_stream_regression_frozen():
    # Pins the exact stream so a refactor cannot silently change outputs.
    rng = Xoshiro256StarStar(2024)
    first = [rng.next_u64() for _ in range(4)]
    assert first == ref_xoshiro_stream(2024, 4)


def test_next_below_is_in_range_and_deterministic():
    rng = Xoshiro256StarStar(5)
    draws = [rng.next_below(10) for _ in range(2000)]
    assert set(draws) <= set(range(10))
    # every residue appears at this volume
    assert set(draws) == set(range(10))
    rng2 = Xoshiro256StarStar(5)
    assert draws == [rng2.next_below(10) for _ in range(2000)]


def test_random_floats_distribution_sane():
    rng = Xoshiro256StarStar(11)
    xs = [rng.random() for _ in range(5000)]
    assert all(0.0 <= x < 1.0 for x in xs)
    assert abs(np.mean(xs) - 0.5) < 0.02
    assert abs(np.var(xs) - 1.0 / 12.0) < 0.005


def test_shuffle_is_permutation_and_seed_stable():
    items = list(range(30))
    a = list(items)
    Xoshiro256StarStar(3).shuffle(a)
    assert sorted(a) == items
    assert a != items  # 1/30! chance; fixed seed makes this a constant
    b = list(items)
    Xoshiro256StarStar(3).shuffle(b)
    assert a == b


def test_sample_without_replacement():
    rng = Xoshiro256StarStar(17)
    picked = rng.sample(list(range(100)), 20)
    assert len(picked) == 20
    assert len(set(picked)) == 20
    assert set(picked) <= set(range(100))


def test_derive_seed_independent_of_consumption_order():
    a = derive_seed(7, "tile")
    b = derive_seed(7, "split")
    assert a != b
    assert a == derive_seed(7, "tile")
    assert derive_seed(7, "wsi", 3) != derive_seed(7, "wsi", 4)


def test_lane_floats_and_integers():
    lanes = XoshiroLanes(seed=1, lanes=16)
    xs = lanes.random_floats(1000)
    assert xs.shape == (1000,)
    assert float(xs.min()) >= 0.0 and float(xs.max()) < 1.0
    ys = XoshiroLanes(seed=1, lanes=16).random_floats(1000)
    assert np.array_equal(xs, ys)
    ints = XoshiroLanes(seed=2, lanes=16).integers_below(7, 500)
    assert ints.min() >= 0 and ints.max() < 7
