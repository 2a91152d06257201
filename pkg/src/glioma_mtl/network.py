"""PS-Net: a 3D U-Net with a strided-convolution stem and classification taps.

Layout for ``depths = D`` and filter schedule ``f[0..D-1]``::

    input (4, X, Y, Z)
      stem      conv 9^3 / stride 3, "same" padding      -> f0  (ceil(n/3))
      level d   conv 3^3 -> ReLU -> conv 3^3 -> BN -> ReLU -> dropout -> [tap d]
                max-pool 2 between levels (ceil)
      decoder   up-conv 2^3/2, crop to skip, concat, two convs as above
      deconv    transposed 9^3 / stride 3, cropped back to (X, Y, Z)
      seg head  conv 1^3 -> softmax over 2 classes
    taps        global max-pool after each encoder dropout, concatenated,
                one dense layer + softmax per classification head

Every convolution except the segmentation head carries the l2 penalty.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import BuildError, InferenceError

HEAD_CLASSES = {"idh": 2, "codeletion": 2, "grade": 3}
PAPER_TRAINABLE = 27_042_473
PAPER_NON_TRAINABLE = 2_944


@dataclass
class NetworkSpec:
    input_shape: tuple = (33, 33, 33, 4)
    depths: int = 3
    filter_schedule: Optional[list] = None
    base_filters: int = 8
    stem_kernel: tuple = (9, 9, 9)
    stem_stride: tuple = (3, 3, 3)
    stem_filters: Optional[int] = None
    conv_kernel: tuple = (3, 3, 3)
    dropout_rate: float = 0.25
    l2_strength: float = 1e-5
    classification_heads: dict = field(default_factory=lambda: dict(HEAD_CLASSES))
    segmentation_classes: int = 2

    def __post_init__(self):
        self.input_shape = tuple(int(n) for n in self.input_shape)
        self.stem_kernel = tuple(int(n) for n in self.stem_kernel)
        self.stem_stride = tuple(int(n) for n in self.stem_stride)
        self.conv_kernel = tuple(int(n) for n in self.conv_kernel)
        if self.filter_schedule is None:
            self.filter_schedule = [self.base_filters * 2 ** d for d in range(self.depths)]
        self.filter_schedule = [int(f) for f in self.filter_schedule]
        self.classification_heads = {k: int(v) for k, v in self.classification_heads.items()}

    @property
    def spatial_shape(self):
        return self.input_shape[:3]

    @property
    def in_channels(self):
        return self.input_shape[3]

    @property
    def stem_out(self):
        return self.stem_filters or self.filter_schedule[0]

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def paper_preset(**overrides):
    """Full-scale configuration: 152x182x145 input, five levels from 32 filters.

    The per-layer numbers of the published architecture figure are not
    available; this schedule reproduces the non-trainable count exactly and
    the trainable count approximately (see :func:`paper_parameter_report`).
    """
    params = dict(input_shape=(152, 182, 145, 4), depths=5,
                  filter_schedule=[32, 64, 128, 256, 512], dropout_rate=0.25,
                  l2_strength=1e-5)
    params.update(overrides)
    return NetworkSpec(**params)


def _same_pad(n, k, s):
    out = math.ceil(n / s)
    total = max((out - 1) * s + k - n, 0)
    return out, (total // 2, total - total // 2)


def validate_spec(spec: NetworkSpec):
    if spec.depths < 2:
        raise BuildError(f"depths must be >= 2, got {spec.depths}")
    if len(spec.filter_schedule) != spec.depths:
        raise BuildError(
            f"filter_schedule has {len(spec.filter_schedule)} entries, depths is {spec.depths}")
    if any(f < 1 for f in spec.filter_schedule) or spec.stem_out < 1:
        raise BuildError("all filter counts must be >= 1")
    if not 0 <= spec.dropout_rate < 1:
        raise BuildError(f"dropout_rate must be in [0, 1), got {spec.dropout_rate}")
    if spec.l2_strength < 0:
        raise BuildError("l2_strength must be >= 0")
    if len(spec.input_shape) != 4:
        raise BuildError(f"input_shape must be (X, Y, Z, C), got {spec.input_shape}")
    for name, k in spec.classification_heads.items():
        if k < 2:
            raise BuildError(f"head {name} needs >= 2 classes")


def shape_plan(spec: NetworkSpec):
    """Feature-map shapes per level and the round-trip check.

    Returns a dict with ``stem`` (shape after the stem), ``levels`` (one shape
    per depth), ``pads`` (stem padding per axis) and ``output`` (shape after
    the final deconvolution).
    """
    validate_spec(spec)
    stem, pads = [], []
    for axis, (n, k, s) in enumerate(zip(spec.spatial_shape, spec.stem_kernel, spec.stem_stride)):
        if n < s:
            raise BuildError(
                f"input dimension {axis} ({n}) is smaller than the stem stride {s}")
        out, pad = _same_pad(n, k, s)
        stem.append(out)
        pads.append(pad)
    levels = [tuple(stem)]
    for _ in range(spec.depths - 1):
        levels.append(tuple(math.ceil(n / 2) for n in levels[-1]))
    # decoder mirrors: up-conv doubles, then crops to the skip shape
    up = levels[-1]
    for skip in reversed(levels[:-1]):
        doubled = tuple(2 * n for n in up)
        if any(d < s for d, s in zip(doubled, skip)):
            raise BuildError(f"up-convolution output {doubled} smaller than skip {skip}")
        up = skip
    output = []
    for axis, (m, k, s, (before, _)) in enumerate(
            zip(up, spec.stem_kernel, spec.stem_stride, pads)):
        full = (m - 1) * s + k
        n = spec.spatial_shape[axis]
        if full - before < n:
            raise BuildError(
                f"final deconvolution cannot restore dimension {axis}: "
                f"{full - before} < {n}")
        output.append(n)
    return {"stem": tuple(stem), "levels": levels, "pads": pads, "output": tuple(output)}


class _LevelBlock(nn.Module):
    def __init__(self, cin, cout, kernel, dropout):
        super().__init__()
        pad = tuple(k // 2 for k in kernel)
        self.conv1 = nn.Conv3d(cin, cout, kernel, padding=pad)
        self.conv2 = nn.Conv3d(cout, cout, kernel, padding=pad)
        self.norm = nn.BatchNorm3d(cout, eps=1e-3, momentum=0.01)
        self.dropout = nn.Dropout3d(dropout) if dropout > 0 else nn.Identity()

    def forward(self, x):
        x = F.relu(self.conv1(x))
        x = F.relu(self.norm(self.conv2(x)))
        return self.dropout(x)


class PSNet(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        self.plan = shape_plan(spec)
        f = spec.filter_schedule
        k = spec.conv_kernel
        self.stem = nn.Conv3d(spec.in_channels, spec.stem_out, spec.stem_kernel,
                              stride=spec.stem_stride)
        self.encoder = nn.ModuleList()
        cin = spec.stem_out
        for d in range(spec.depths):
            self.encoder.append(_LevelBlock(cin, f[d], k, spec.dropout_rate))
            cin = f[d]
        self.upconvs = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for d in range(spec.depths - 2, -1, -1):
            self.upconvs.append(nn.ConvTranspose3d(cin, cin, 2, stride=2))
            self.decoder.append(_LevelBlock(cin + f[d], f[d], k, spec.dropout_rate))
            cin = f[d]
        self.deconv = nn.ConvTranspose3d(cin, f[0], spec.stem_kernel, stride=spec.stem_stride)
        self.seg_head = nn.Conv3d(f[0], spec.segmentation_classes, 1)
        n_features = sum(f)
        self.heads = nn.ModuleDict(
            {name: nn.Linear(n_features, n) for name, n in spec.classification_heads.items()})
        self.registry = self._build_registry()

    # -- bookkeeping -------------------------------------------------------
    def _build_registry(self):
        plan, spec = self.plan, self.spec
        levels = plan["levels"]
        reg = {"stem": {"role": "stem", "shape": plan["stem"] + (spec.stem_out,)}}
        for d, block in enumerate(self.encoder):
            shape = levels[d] + (spec.filter_schedule[d],)
            reg[f"encoder.{d}.conv1"] = {"role": "encoder_conv", "shape": shape}
            reg[f"encoder.{d}.conv2"] = {"role": "encoder_conv", "shape": shape}
            reg[f"encoder.{d}.norm"] = {"role": "batch_norm", "shape": shape}
            reg[f"tap.{d}"] = {"role": "global_max_tap", "shape": (spec.filter_schedule[d],)}
        for i, d in enumerate(range(spec.depths - 2, -1, -1)):
            shape = levels[d] + (spec.filter_schedule[d],)
            up_c = self.upconvs[i].out_channels
            reg[f"upconvs.{i}"] = {"role": "up_conv", "shape": levels[d] + (up_c,)}
            reg[f"decoder.{i}.conv1"] = {"role": "decoder_conv", "shape": shape}
            reg[f"decoder.{i}.conv2"] = {"role": "decoder_conv", "shape": shape}
            reg[f"decoder.{i}.norm"] = {"role": "batch_norm", "shape": shape}
        reg["deconv"] = {"role": "final_deconv",
                         "shape": spec.spatial_shape + (self.deconv.out_channels,)}
        reg["seg_head"] = {"role": "segmentation_head",
                           "shape": spec.spatial_shape + (spec.segmentation_classes,)}
        for name, n in spec.classification_heads.items():
            reg[f"heads.{name}"] = {"role": "classification_head", "shape": (n,)}
        return reg

    def layer(self, name):
        if name.startswith("tap."):
            return None
        return self.get_submodule(name)

    def l2_penalty(self):
        """``l2 * sum(W^2)`` over every convolution kernel except the segmentation head."""
        if self.spec.l2_strength == 0:
            return None
        total = 0.0
        for name, entry in self.registry.items():
            if entry["role"] in ("stem", "encoder_conv", "decoder_conv", "up_conv", "final_deconv"):
                total = total + self.layer(name).weight.pow(2).sum()
        return self.spec.l2_strength * total

    # -- forward -----------------------------------------------------------
    def features(self, x):
        """Run the trunk; returns ``(taps, seg_logits)``."""
        pads = self.plan["pads"]
        # F.pad wants the last axis first
        flat = [p for pair in reversed(pads) for p in pair]
        x = F.relu(self.stem(F.pad(x, flat)))
        skips, taps = [], []
        for d, block in enumerate(self.encoder):
            if d > 0:
                x = F.max_pool3d(x, 2, ceil_mode=True)
            x = block(x)
            skips.append(x)
            taps.append(torch.amax(x, dim=(2, 3, 4)))
        for up, block, skip in zip(self.upconvs, self.decoder, reversed(skips[:-1])):
            x = up(x)
            x = x[(...,) + tuple(slice(0, n) for n in skip.shape[2:])]
            x = block(torch.cat([x, skip], dim=1))
        x = self.deconv(x)
        x = x[(...,) + tuple(slice(b, b + n) for (b, _), n in zip(pads, self.spec.spatial_shape))]
        seg_logits = self.seg_head(F.relu(x))
        return torch.cat(taps, dim=1), seg_logits

    def forward(self, x, logits=False):
        if tuple(x.shape[1:]) != (self.spec.in_channels,) + self.spec.spatial_shape:
            raise InferenceError(
                f"expected batch of shape (B, {self.spec.in_channels}, "
                f"{', '.join(map(str, self.spec.spatial_shape))}), got {tuple(x.shape)}")
        features, seg_logits = self.features(x)
        out = {}
        for name, head in self.heads.items():
            z = head(features)
            out[f"{name}_scores"] = z if logits else torch.softmax(z.float(), dim=1)
        out["seg_probabilities"] = seg_logits if logits else torch.softmax(seg_logits.float(), dim=1)
        return out


def build_psnet(spec: NetworkSpec, seed=None) -> PSNet:
    """Build a PS-Net; raises :class:`BuildError` on an inconsistent spec."""
    if seed is not None:
        torch.manual_seed(seed)
    return PSNet(spec)


def count_parameters(model: nn.Module):
    """``(trainable, non_trainable)``; non-trainable = BN moving statistics."""
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    frozen = sum(p.numel() for p in model.parameters() if not p.requires_grad)
    stats = sum(b.numel() for name, b in model.named_buffers()
                if name.endswith(("running_mean", "running_var")))
    return trainable, frozen + stats


def closed_form_parameters(spec: NetworkSpec):
    """Parameter count from layer arithmetic alone (independent of torch)."""
    validate_spec(spec)
    f = spec.filter_schedule
    cube = lambda k: int(np.prod(k))
    conv = lambda k, ci, co: cube(k) * ci * co + co
    trainable = conv(spec.stem_kernel, spec.in_channels, spec.stem_out)
    bn_channels = 0
    cin = spec.stem_out
    for d in range(spec.depths):
        trainable += conv(spec.conv_kernel, cin, f[d]) + conv(spec.conv_kernel, f[d], f[d])
        bn_channels += f[d]
        cin = f[d]
    for d in range(spec.depths - 2, -1, -1):
        trainable += conv((2, 2, 2), cin, cin)
        trainable += conv(spec.conv_kernel, cin + f[d], f[d]) + conv(spec.conv_kernel, f[d], f[d])
        bn_channels += f[d]
        cin = f[d]
    trainable += conv(spec.stem_kernel, cin, f[0])
    trainable += conv((1, 1, 1), f[0], spec.segmentation_classes)
    trainable += sum(sum(f) * n + n for n in spec.classification_heads.values())
    trainable += 2 * bn_channels
    return trainable, 2 * bn_channels


def paper_parameter_report(spec=None):
    """Counts of the paper preset next to the published totals.

    Uses the closed form, so the full-size model never has to be allocated.
    """
    spec = spec or paper_preset()
    trainable, frozen = closed_form_parameters(spec)
    return {
        "trainable": trainable,
        "non_trainable": frozen,
        "paper_trainable": PAPER_TRAINABLE,
        "paper_non_trainable": PAPER_NON_TRAINABLE,
        "trainable_delta": trainable - PAPER_TRAINABLE,
        "non_trainable_delta": frozen - PAPER_NON_TRAINABLE,
        "relative_trainable_delta": (trainable - PAPER_TRAINABLE) / PAPER_TRAINABLE,
        "note": ("per-layer filter counts of the published figure are not available; "
                 "the delta reflects the assumed doubling schedule"),
    }


def forward(model: PSNet, batch, logits=False):
    """Inference-mode forward pass on a numpy or torch batch ``(B, 4, X, Y, Z)``."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            x = torch.as_tensor(np.asarray(batch) if not torch.is_tensor(batch) else batch)
            x = x.to(next(model.parameters()).dtype)
            return model(x, logits=logits)
    finally:
        model.train(was_training)


def save_checkpoint(model: PSNet, path):
    """Weights to ``path`` (torch container) and the spec to ``path + '.json'``."""
    torch.save(model.state_dict(), path)
    with open(str(path) + ".json", "w") as fh:
        fh.write(model.spec.to_json())


def load_checkpoint(path):
    with open(str(path) + ".json") as fh:
        spec = NetworkSpec.from_json(fh.read())
    model = PSNet(spec)
    model.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    model.eval()
    return model
