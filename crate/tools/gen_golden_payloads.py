#!/usr/bin/env python3
"""Generate the golden CSIQ payload vectors under crates/lab/tests/golden/.

Independent of the Rust implementation: frames are assembled with hand-done
bit math. Index sequences come from a tiny LCG so they are reproducible.

Frame layout (little-endian): magic "CSIQ", u8 version=1, u8 bits,
u16 M, u8 step, then indices packed MSB-first (first element in the most
significant bits of the first byte; final byte zero-padded on the right).
"""

import json
import os
import struct

OUT = os.path.join(os.path.dirname(__file__), "..", "crates", "lab", "tests", "golden")


def lcg(seed):
    state = seed
    while True:
        state = (state * 6364136223846793005 + 1442695040888963407) % (1 << 64)
        yield state >> 33


def indices(seed, count, bits):
    g = lcg(seed)
    return [next(g) & ((1 << bits) - 1) for _ in range(count)]


def pack_msb_first(idx, bits):
    out = bytearray()
    acc = 0
    pending = 0
    for v in idx:
        acc = (acc << bits) | v
        pending += bits
        while pending >= 8:
            out.append((acc >> (pending - 8)) & 0xFF)
            pending -= 8
            acc &= (1 << pending) - 1
    if pending:
        out.append((acc << (8 - pending)) & 0xFF)
    return bytes(out)


def frame(bits, step, idx):
    header = b"CSIQ" + struct.pack("<BBHB", 1, bits, len(idx), step)
    return header + pack_msb_first(idx, bits)


def main():
    os.makedirs(OUT, exist_ok=True)
    cases = [
        ("payload_b8_m32_s0", 8, 0, indices(1, 32, 8)),
        ("payload_b6_m32_s1", 6, 1, indices(2, 32, 6)),
        ("payload_b6_m5_s3", 6, 3, indices(3, 5, 6)),
        ("payload_b8_m128_s2", 8, 2, indices(4, 128, 8)),
    ]
    manifest = {}
    for name, bits, step, idx in cases:
        with open(os.path.join(OUT, name + ".csiq"), "wb") as f:
            f.write(frame(bits, step, idx))
        manifest[name] = {"bits": bits, "step": step, "indices": idx}
    with open(os.path.join(OUT, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    print(f"wrote {len(cases)} golden payloads to {OUT}")


if __name__ == "__main__":
    main()
