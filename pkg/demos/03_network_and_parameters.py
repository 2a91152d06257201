"""
The multi-task network
======================

A 9x9x9 stride-3 stem shrinks the volume, a small U-Net follows, and a global
max over every encoder depth feeds three dense classification heads.
"""

import torch

from glioma_mtl.network import (NetworkSpec, build_psnet, count_parameters, forward,
                                paper_parameter_report)

spec = NetworkSpec(input_shape=(32, 32, 32, 4), depths=3, base_filters=8)
model = build_psnet(spec, seed=0)
for name, entry in model.registry.items():
    print(f"{name:<22} {entry['role']:<20} {entry['shape']}")

trainable, frozen = count_parameters(model)
print("trainable", trainable, "non-trainable", frozen)

out = forward(model, torch.randn(2, 4, 32, 32, 32))
for key, value in out.items():
    print(key, tuple(value.shape))

# the full-size preset, counted without allocating it
report = paper_parameter_report()
print("full-size preset: {trainable:,} trainable / {non_trainable:,} non-trainable".format(
    **report))
print("published:        {paper_trainable:,} / {paper_non_trainable:,}".format(**report))
print(report["note"])
