"""Swapped-word augmentation on senone label streams.

Each frame swaps the two speakers' labels with probability alpha, then no
swap may happen for the next beta frames.  The long-run event rate of that
renewal process is alpha / (1 + alpha * beta).
"""
import numpy as np

from pitlab.graphlm import augment_swapped

alpha, beta = 0.4, 10
a = np.arange(40) % 5 + 1
b = (np.arange(40) // 4) % 5 + 6
out = augment_swapped([(a, b)], alpha, beta, gamma=1, seed=0)
print("speaker A  ", " ".join(f"{x:2d}" for x in out[0]))
print("speaker B  ", " ".join(f"{x:2d}" for x in out[1]))
print("swapped A  ", " ".join(f"{x:2d}" for x in out[2]))
print("events at  ", np.flatnonzero(out[2] != a).tolist())

length = 100_000
long = augment_swapped([(np.zeros(length, int), np.ones(length, int))], alpha, beta, gamma=1, seed=1)
events = np.flatnonzero(long[2] == 1)
print(f"measured rate {len(events) / length:.4f}, renewal rate {alpha / (1 + alpha * beta):.4f}")
print(f"shortest gap between swaps: {np.diff(events).min()} frames")
