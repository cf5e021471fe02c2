"""Permutation invariant training toolkit for multi-talker speech recognition
on synthetic overlapped speech: modular networks, PIT losses, senone graphs,
lattice-free sequence criteria, decoding and the training harness."""

__version__ = "0.1.0"
