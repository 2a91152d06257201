"""SmoothGrad saliency maps and convolution filter outputs."""

from __future__ import annotations

import numpy as np
import torch

from .data_model import Case, Sample, VolumeGrid
from .errors import ConfigError


def _as_batch(model, image):
    if isinstance(image, Case):
        image = image.image()
    elif isinstance(image, Sample):
        image = image.image
    x = torch.as_tensor(np.asarray(image), dtype=next(model.parameters()).dtype)
    if x.dim() != 4:
        raise ValueError(f"expected one image of shape (4, X, Y, Z), got {tuple(x.shape)}")
    return x[None]


def smoothgrad_saliency(model, image, head, n_samples=25, noise_fraction=0.15, seed=0,
                        target_class=None):
    """Mean absolute input gradient of the predicted class's pre-softmax score.

    Gaussian noise with std ``noise_fraction * (max - min)`` of the input is
    added independently for each of the ``n_samples`` passes. ``image`` is a
    :class:`Case`, a :class:`Sample` or an array ``(4, X, Y, Z)``; the result
    is one :class:`VolumeGrid` per input channel.
    """
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}")
    if head not in getattr(model, "heads", {}):
        raise ConfigError(f"model has no head {head!r}")
    x = _as_batch(model, image)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            logits = model(x, logits=True)[f"{head}_scores"][0]
        cls = int(torch.argmax(logits)) if target_class is None else int(target_class)
        gen = torch.Generator().manual_seed(seed)
        sigma = noise_fraction * float(x.max() - x.min())
        total = torch.zeros_like(x)
        for _ in range(n_samples):
            noisy = x.clone()
            if sigma > 0:
                noisy += sigma * torch.randn(x.shape, generator=gen, dtype=x.dtype)
            noisy.requires_grad_(True)
            score = model(noisy, logits=True)[f"{head}_scores"][0, cls]
            grad, = torch.autograd.grad(score, noisy)
            total += grad.abs()
    finally:
        model.train(was_training)
    saliency = (total / n_samples)[0].numpy()
    return [VolumeGrid(s, _spacing(image)) for s in saliency]


def _spacing(image):
    return image.spacing if isinstance(image, Case) else (1.0, 1.0, 1.0)


def filter_outputs(model, image, layer_name):
    """Pre-activation feature maps of a registered convolution, one per filter.

    Returns one :class:`VolumeGrid` per filter whose shape matches the
    layer's registry entry; the spacing is scaled by the layer's downsampling.
    """
    registry = getattr(model, "registry", {})
    entry = registry.get(layer_name)
    if entry is None or entry["role"] in ("global_max_tap", "classification_head", "batch_norm"):
        convs = sorted(k for k, v in registry.items()
                       if v["role"] not in ("global_max_tap", "classification_head", "batch_norm"))
        raise ConfigError(f"unknown convolution {layer_name!r}; available: {', '.join(convs)}")
    module = model.layer(layer_name)
    captured = {}

    def hook(_module, _inputs, output):
        captured["out"] = output.detach()

    handle = module.register_forward_hook(hook)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(_as_batch(model, image))
    finally:
        handle.remove()
        model.train(was_training)
    out = captured["out"][0]
    # the final deconvolution is cropped back to the input grid in forward()
    if entry["role"] == "final_deconv":
        pads = model.plan["pads"]
        out = out[(slice(None),) + tuple(slice(b, b + n) for (b, _), n in
                                         zip(pads, model.spec.spatial_shape))]
    elif entry["role"] == "up_conv":
        out = out[(slice(None),) + tuple(slice(0, n) for n in entry["shape"][:3])]
    out = out.numpy()
    ratio = [n / m for n, m in zip(model.spec.spatial_shape, out.shape[1:])]
    spacing = tuple(float(s * r) for s, r in zip(_spacing(image), ratio))
    return [VolumeGrid(v, spacing) for v in out]
