#!/usr/bin/env python3
"""Regenerates the g2_tiny fixture: two small timestamp files and the
brute-force coincidence histogram expected from `qfso g2`."""

import random
import struct
from fractions import Fraction
from pathlib import Path

BIN_PS = 100
RANGE_PS = 1000
DURATION_S = Fraction(1, 10**6)
OUT = Path(__file__).resolve().parent / "g2_tiny"


def write_bin(path, channel, ts):
    with open(path, "wb") as f:
        f.write(b"QFSO")
        f.write(struct.pack("<HHQ", 1, channel, len(ts)))
        f.write(struct.pack(f"<{len(ts)}Q", *ts))


def delay_bin(tau):
    # Nearest bin, halves away from zero, computed exactly.
    k = Fraction(abs(tau), BIN_PS)
    n = int(k + Fraction(1, 2))
    return n if tau >= 0 else -n


def main():
    rng = random.Random(20240617)
    signal = sorted({rng.randrange(0, 10**6) for _ in range(300)})
    idler = set()
    for t in signal:
        if rng.random() < 0.5:
            idler.add(t + rng.randrange(-150, 151))
    while len(idler) < 320:
        idler.add(rng.randrange(0, 10**6))
    idler = sorted(max(0, t) for t in idler)

    K = RANGE_PS // BIN_PS
    counts = [0] * (2 * K + 1)
    for s in signal:
        for i in idler:
            k = delay_bin(i - s)
            if -K <= k <= K:
                counts[k + K] += 1
    accidental = Fraction(len(signal)) * len(idler) * BIN_PS / 10**12 / DURATION_S
    g2 = [Fraction(c) / accidental for c in counts]

    OUT.mkdir(exist_ok=True)
    write_bin(OUT / "signal.bin", 0, signal)
    write_bin(OUT / "idler.bin", 1, idler)
    with open(OUT / "expected.csv", "w") as f:
        f.write("tau_ps,counts,g2\n")
        for j, c in enumerate(counts):
            f.write(f"{(j - K) * BIN_PS},{c},{float(g2[j])!r}\n")


if __name__ == "__main__":
    main()
