"""One seed of the desk-scale directional experiment (about 90 s).

Compares progressive vs flat joint training on validation CE-PIT, and the
self-transfer and LF-DC-bMMI models against the CE-PIT model on test WER.
"""
import sys

from pitlab.experiment import run_directional

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
r = run_directional(seed)
print(f"seed {r.seed}  ({r.seconds:.0f}s)")
print(f"validation CE-PIT  progressive {r.progressive_valid:.4f}  flat {r.flat_valid:.4f}")
print(f"test pairwise WER  CE {r.wer_ce:.4f}  transfer {r.wer_transfer:.4f}  LF-DC-bMMI {r.wer_seqdisc:.4f}")
