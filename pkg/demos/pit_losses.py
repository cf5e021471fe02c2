"""Frame-level vs utterance-level PIT, and the soft-target losses.

Two output streams track two speakers, but the references swap halfway.
Frame-level PIT is free to re-pair every frame and reports zero loss;
utterance-level PIT must commit to one pairing and pays for the switch.
"""
import numpy as np

from pitlab.pitloss import ce_pit, interpolate, kld_pit, mse_pit_frame, mse_pit_utt

outputs = np.array([[[0.0], [0.0], [0.0], [0.0]],
                    [[1.0], [1.0], [1.0], [1.0]]])
refs = np.array([[[0.0], [0.0], [1.0], [1.0]],
                 [[1.0], [1.0], [0.0], [0.0]]])

f = mse_pit_frame(outputs, refs)
u = mse_pit_utt(outputs, refs)
print(f"frame PIT     {f.value:.3f}  pairings per frame {f.permutation}")
print(f"utterance PIT {u.value:.3f}  pairing {u.permutation}")

rng = np.random.default_rng(0)
logits = rng.normal(size=(2, 5, 4))
student = logits - np.logaddexp.reduce(logits, axis=-1, keepdims=True)
labels = rng.integers(0, 4, size=(2, 5))
# a sharp teacher that agrees with the labels on the swapped pairing
teacher = np.log(np.full((2, 5, 4), 0.02) + 0.92 * np.eye(4)[labels[::-1]])

hard, soft = ce_pit(student, labels), kld_pit(student, teacher)
for w in (1.0, 0.5, 0.0):
    r = interpolate(hard, soft, w)
    print(f"w={w:.1f}  loss {r.value:.4f}  pairing {r.permutation}")
