"""Independent splitmix64 + xoshiro256** reference used to freeze
fixtures/rng_seed42.bin (first 1000 draws, little-endian u64)."""
import struct
import sys

MASK = (1 << 64) - 1


def splitmix64(state):
    state = (state + 0x9E3779B97F4A7C15) & MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return state, z ^ (z >> 31)


def rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & MASK


def xoshiro_stream(seed, count):
    s = []
    sm = seed
    for _ in range(4):
        sm, word = splitmix64(sm)
        s.append(word)
    for _ in range(count):
        result = (rotl((s[1] * 5) & MASK, 7) * 9) & MASK
        t = (s[1] << 17) & MASK
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = rotl(s[3], 45)
        yield result


if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else "fixtures/rng_seed42.bin"
    with open(out, "wb") as fh:
        for value in xoshiro_stream(42, 1000):
            fh.write(struct.pack("<Q", value))
