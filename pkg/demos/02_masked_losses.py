"""
Losses that ignore missing labels
=================================

A sample whose label is unknown gets an all-zero one-hot row. It then adds
nothing to the cross-entropy and is not counted in the average either.
"""

import torch

from glioma_mtl.losses import class_weights, dice_loss, masked_weighted_cce

# IDH in the training set: 440 wildtype, 226 mutated
w = class_weights([440, 226])
print("IDH class weights", w.round(6), "| weight x count", (w * [440, 226]).round(3))

probs = torch.tensor([[0.8, 0.2], [0.3, 0.7], [0.5, 0.5]], dtype=torch.float64)
y = torch.tensor([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]], dtype=torch.float64)  # third unknown
full = masked_weighted_cce(y, probs, w)
known_only = masked_weighted_cce(y[:2], probs[:2], w)
print("with unknown row", float(full.value), "| without", float(known_only.value))

# a batch with no known label carries no signal at all
empty = masked_weighted_cce(torch.zeros(2, 2, dtype=torch.float64), probs[:2], w)
print("no-signal batch:", empty.no_signal, float(empty.value))

# soft DICE loss on the tumour channel
target = torch.zeros(1, 4, 4, 4, dtype=torch.float64)
target[0, 1:3, 1:3, 1:3] = 1
for quality in (0.2, 0.6, 0.95):
    p = torch.where(target > 0, quality, 1 - quality)
    print(f"tumour prob {quality:.2f} -> dice loss {float(dice_loss(target, p)):.3f}")

# the gradient is in closed form; compare with a central difference
p = torch.full((1, 4, 4, 4), 0.5, dtype=torch.float64, requires_grad=True)
dice_loss(target, p).backward()
h = 1e-6
bump = torch.zeros_like(p)
bump[0, 1, 1, 1] = h
numeric = (dice_loss(target, p.detach() + bump) - dice_loss(target, p.detach() - bump)) / (2 * h)
print("d loss / d p[1,1,1]:", float(p.grad[0, 1, 1, 1]), "numeric", float(numeric))
