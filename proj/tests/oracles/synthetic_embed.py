"""Independent reimplementation of the synthetic sentence embedder.

Prints float32 bit patterns for golden-vector tests.
"""
import math
import struct
import sys

M64 = (1 << 64) - 1


def splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & M64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & M64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & M64
    return x ^ (x >> 31)


def fnv1a64(data):
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & M64
    return h


class Stream:
    def __init__(self, seed):
        self.state = seed

    def next(self):
        self.state = (self.state + 0x9E3779B97F4A7C15) & M64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M64
        return z ^ (z >> 31)

    def uniform(self):
        return (self.next() >> 11) * 2.0 ** -53

    def normal(self):
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


def embed(sentence, dim, seed):
    key = fnv1a64(sentence.encode("utf-8")) ^ splitmix64(seed & M64)
    rng = Stream(splitmix64(key))
    v = [rng.normal() for _ in range(dim)]
    inv = 1.0 / math.sqrt(sum(x * x for x in v))
    return [x * inv for x in v]


if __name__ == "__main__":
    sentence, dim, seed = sys.argv[1], int(sys.argv[2]), int(sys.argv[3])
    bits = [struct.unpack("<I", struct.pack("<f", x))[0] for x in embed(sentence, dim, seed)]
    print(", ".join("0x%08x" % b for b in bits))
