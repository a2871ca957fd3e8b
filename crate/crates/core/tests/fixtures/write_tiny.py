"""Writes tiny.smds byte by byte from the format description.

3 samples, 2 classes, 2 frequency bins, 3 frames.
Sample s, bin f, frame t holds 0.25 * (s * 6 + f * 3 + t) - 1.0.
Labels are 1, 0, 1.
"""
import struct

n, k, f, t = 3, 2, 2, 3
labels = [1, 0, 1]
out = bytearray(b"SMDS1")
out += struct.pack("<4I", n, k, f, t)
for s in range(n):
    out += struct.pack("<I", labels[s])
    for i in range(f * t):
        out += struct.pack("<f", 0.25 * (s * 6 + i) - 1.0)
with open("tiny.smds", "wb") as fh:
    fh.write(bytes(out))
