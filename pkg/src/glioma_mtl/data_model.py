"""In-memory representation of cases, labels with unknowns and predictions.

Labels use a fixed vocabulary order per output so that the "positive" class
index is stable everywhere::

    idh         (wildtype, mutated)      positive = mutated
    codeletion  (intact, co-deleted)     positive = co-deleted
    grade       (II, III, IV)

An unknown label is stored as the all-zeros vector, which is exactly what the
masked cross-entropy expects.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import VocabularyError

CHANNELS = ("preT1", "postT1", "T2", "FLAIR")

VOCABULARY = {
    "idh": ("wildtype", "mutated"),
    "codeletion": ("intact", "co-deleted"),
    "grade": ("II", "III", "IV"),
}
OUTPUTS = tuple(VOCABULARY)

WHO_SUBTYPES = (
    "oligodendroglioma",
    "astro_idh_mut",
    "astro_idh_wt",
    "gbm_idh_mut",
    "gbm_idh_wt",
    "other",
)


class VolumeKind(str, enum.Enum):
    INTENSITY = "intensity"
    BINARY_MASK = "binary_mask"
    PROBABILITY = "probability"


class SegmentationSource(str, enum.Enum):
    MANUAL = "manual"
    AUTOMATIC = "automatic"
    NONE = "none"


def _readonly(array):
    array = np.array(array, copy=True)
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class VolumeGrid:
    """A 3D scalar field with voxel spacing in mm.

    Construction only enforces dimensionality; the value-level invariants are
    reported by :meth:`violations` so that malformed inputs can be described
    instead of rejected outright.
    """

    values: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    kind: VolumeKind = VolumeKind.INTENSITY

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 3:
            raise ValueError(f"VolumeGrid needs a 3D array, got ndim={values.ndim}")
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "kind", VolumeKind(self.kind))

    @property
    def shape(self):
        return self.values.shape

    def violations(self, path="volume"):
        found = []
        if len(self.spacing) != 3 or any(not s > 0 for s in self.spacing):
            found.append(f"{path}.spacing: components must be > 0, got {self.spacing}")
        if any(n < 1 for n in self.shape):
            found.append(f"{path}.values: empty dimension in shape {self.shape}")
        if self.kind is VolumeKind.BINARY_MASK:
            if not np.isin(self.values, (0, 1)).all():
                found.append(f"{path}.values: binary mask contains values outside {{0, 1}}")
        elif self.kind is VolumeKind.PROBABILITY:
            v = self.values
            if not ((v >= 0) & (v <= 1)).all():
                found.append(f"{path}.values: probabilities outside [0, 1]")
        return found

    def with_values(self, values, kind=None):
        return VolumeGrid(values, self.spacing, self.kind if kind is None else kind)


@dataclass(frozen=True, eq=False)
class LabelSet:
    """One-hot labels per output; all-zeros means unknown."""

    idh: np.ndarray = field(default_factory=lambda: np.zeros(2))
    codeletion: np.ndarray = field(default_factory=lambda: np.zeros(2))
    grade: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name, vocab in VOCABULARY.items():
            row = np.asarray(getattr(self, name), dtype=np.float64)
            if row.shape != (len(vocab),):
                raise ValueError(f"{name} row must have shape ({len(vocab)},)")
            if not (np.isin(row, (0.0, 1.0)).all() and row.sum() in (0.0, 1.0)):
                raise ValueError(f"{name} row must be one-hot or all zeros, got {row}")
            object.__setattr__(self, name, _readonly(row))

    def row(self, output):
        return getattr(self, output)

    def is_known(self, output):
        return bool(self.row(output).sum() == 1)

    def index(self, output):
        """Class index for a known output, ``None`` when unknown."""
        row = self.row(output)
        return int(np.argmax(row)) if row.sum() == 1 else None

    def category(self, output):
        i = self.index(output)
        return None if i is None else VOCABULARY[output][i]

    def __eq__(self, other):
        if not isinstance(other, LabelSet):
            return NotImplemented
        return all(np.array_equal(self.row(o), other.row(o)) for o in OUTPUTS)


def encode_labelset(raw: Mapping[str, Optional[str]]) -> LabelSet:
    """One-hot encode a map of output name to category string.

    Missing keys, ``None`` and empty strings become UNKNOWN.
    """
    rows = {}
    for name, vocab in VOCABULARY.items():
        value = raw.get(name)
        row = np.zeros(len(vocab))
        if value is not None and str(value).strip() != "":
            value = str(value).strip()
            if value not in vocab:
                raise VocabularyError(name, value)
            row[vocab.index(value)] = 1.0
        rows[name] = row
    unknown_keys = set(raw) - set(VOCABULARY)
    if unknown_keys:
        raise VocabularyError("label", sorted(unknown_keys)[0])
    return LabelSet(**rows)


def decode_labelset(labels: LabelSet) -> dict:
    return {name: labels.category(name) for name in OUTPUTS}


def index_labelset(idh=None, codeletion=None, grade=None) -> LabelSet:
    """Build a LabelSet from class indices (``None`` = unknown)."""
    rows = {}
    for name, idx in zip(OUTPUTS, (idh, codeletion, grade)):
        row = np.zeros(len(VOCABULARY[name]))
        if idx is not None:
            row[int(idx)] = 1.0
        rows[name] = row
    return LabelSet(**rows)


@dataclass(frozen=True, eq=False)
class Case:
    case_id: str
    channels: tuple
    labels: LabelSet = field(default_factory=LabelSet)
    segmentation: Optional[VolumeGrid] = None
    segmentation_source: SegmentationSource = SegmentationSource.NONE

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        source = SegmentationSource(self.segmentation_source)
        if self.segmentation is None:
            source = SegmentationSource.NONE
        elif source is SegmentationSource.NONE:
            source = SegmentationSource.MANUAL
        object.__setattr__(self, "segmentation_source", source)

    @property
    def shape(self):
        return self.channels[0].shape

    @property
    def spacing(self):
        return self.channels[0].spacing

    def image(self, dtype=np.float32):
        """Channels stacked as a ``(4, X, Y, Z)`` array."""
        return np.stack([c.values for c in self.channels]).astype(dtype)

    def replace(self, **changes):
        fields = dict(case_id=self.case_id, channels=self.channels, labels=self.labels,
                      segmentation=self.segmentation,
                      segmentation_source=self.segmentation_source)
        fields.update(changes)
        return Case(**fields)


def validate_case(case: Case) -> list:
    """List every violated Case/VolumeGrid invariant as a human-readable string.

    Each entry starts with the field path (``channels[FLAIR].values`` ...).
    An empty list means the case is well formed.
    """
    violations = []
    if len(case.channels) != len(CHANNELS):
        violations.append(
            f"channels: expected {len(CHANNELS)} volumes, got {len(case.channels)}")
    if not case.channels:
        return violations
    ref = case.channels[0]
    for name, vol in zip(CHANNELS, case.channels):
        path = f"channels[{name}]"
        violations.extend(vol.violations(path))
        if vol is not ref:
            if vol.shape != ref.shape:
                violations.append(
                    f"{path}.values: shape {vol.shape} differs from {CHANNELS[0]} {ref.shape}")
            if vol.spacing != ref.spacing:
                violations.append(
                    f"{path}.spacing: {vol.spacing} differs from {CHANNELS[0]} {ref.spacing}")
    seg = case.segmentation
    if seg is not None:
        if seg.kind is not VolumeKind.BINARY_MASK:
            violations.append(f"segmentation.kind: expected binary_mask, got {seg.kind.value}")
        violations.extend(seg.violations("segmentation"))
        if seg.shape != ref.shape:
            violations.append(
                f"segmentation.values: shape {seg.shape} differs from channels {ref.shape}")
        if seg.spacing != ref.spacing:
            violations.append(
                f"segmentation.spacing: {seg.spacing} differs from channels {ref.spacing}")
    return violations


@dataclass(frozen=True, eq=False)
class Sample:
    """Training-ready tensors for one case.

    ``image`` is ``(4, X, Y, Z)`` float32, ``mask`` is ``(X, Y, Z)`` uint8 or
    ``None`` when no segmentation is available.
    """

    case_id: str
    image: np.ndarray
    labels: LabelSet
    mask: Optional[np.ndarray] = None

    @classmethod
    def from_case(cls, case: Case):
        mask = None
        if case.segmentation is not None:
            mask = np.asarray(case.segmentation.values, dtype=np.uint8)
        return cls(case.case_id, case.image(), case.labels, mask)


@dataclass(frozen=True, eq=False)
class PredictionRecord:
    case_id: str
    idh_scores: np.ndarray
    codeletion_scores: np.ndarray
    grade_scores: np.ndarray
    lgg_hgg_scores: tuple
    tumor_probability: Optional[VolumeGrid]
    derived_labels: dict
    who_subtype: str

    def violations(self, atol=1e-5):
        found = []
        for name in ("idh_scores", "codeletion_scores", "grade_scores"):
            total = float(np.sum(getattr(self, name)))
            if abs(total - 1.0) > atol:
                found.append(f"{name}: sums to {total}")
        g = np.asarray(self.grade_scores)
        if tuple(self.lgg_hgg_scores) != (g[0] + g[1], g[2]):
            found.append("lgg_hgg_scores: not (II + III, IV)")
        if self.who_subtype not in WHO_SUBTYPES:
            found.append(f"who_subtype: {self.who_subtype!r} not a known subtype")
        if self.tumor_probability is not None:
            found.extend(self.tumor_probability.violations("tumor_probability"))
        return found


def stack_labels(samples: Sequence[Sample], output: str) -> np.ndarray:
    """``(N, |C|)`` one-hot-or-zero matrix for one output."""
    return np.stack([s.labels.row(output) for s in samples])
