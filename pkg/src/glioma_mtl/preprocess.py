"""Case ingestion and the preprocessing chain.

On disk a case is a directory holding one NIfTI volume per contrast::

    <case_id>/t1.nii.gz  t1gd.nii.gz  t2.nii.gz  flair.nii.gz  [seg.nii.gz]

and labels come from a CSV with header ``case_id,idh,codeletion,grade`` where
an empty cell means unknown. Registration, bias-field correction and skull
stripping are external programs; they are run from command templates or
skipped when the inputs are already aligned.
"""

from __future__ import annotations

import csv
import json
import logging
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import nibabel as nib
import numpy as np
from scipy import ndimage

from .data_model import (CHANNELS, Case, LabelSet, Sample, SegmentationSource, VolumeGrid,
                         VolumeKind, encode_labelset)
from .errors import IngestionError, PreprocessError

log = logging.getLogger(__name__)

CHANNEL_FILES = {"preT1": "t1", "postT1": "t1gd", "T2": "t2", "FLAIR": "flair"}
MASK_FILE = "seg"
EXTENSIONS = (".nii.gz", ".nii")
EXTERNAL_STAGES = ("registration", "bias_correction", "skull_strip")


@dataclass
class PreprocessConfig:
    external_stage_commands: dict = field(default_factory=dict)
    brain_mask_path: Optional[str] = None
    target_crop: str = "brain_mask_bbox"
    normalization_epsilon: float = 1e-8
    smooth_training_masks: bool = False
    store_float16: bool = False

    def __post_init__(self):
        if not self.normalization_epsilon > 0:
            raise PreprocessError("normalization_epsilon must be > 0")
        unknown = set(self.external_stage_commands) - set(EXTERNAL_STAGES)
        if unknown:
            raise PreprocessError(f"unknown external stages: {sorted(unknown)}")


# -- volume IO ---------------------------------------------------------------

def _find_volume(directory: Path, stem: str):
    for ext in EXTENSIONS:
        path = directory / f"{stem}{ext}"
        if path.exists():
            return path
    return None


def read_volume(path, kind=VolumeKind.INTENSITY) -> VolumeGrid:
    img = nib.load(str(path))
    values = np.asarray(img.dataobj)
    spacing = tuple(float(s) for s in img.header.get_zooms()[:3])
    if VolumeKind(kind) is VolumeKind.BINARY_MASK:
        values = values.astype(np.uint8)
    else:
        values = values.astype(np.float32)
    return VolumeGrid(values, spacing, kind)


def write_volume(volume: VolumeGrid | np.ndarray, path, spacing=None):
    if isinstance(volume, VolumeGrid):
        values, spacing = volume.values, volume.spacing
    else:
        values = np.asarray(volume)
    spacing = spacing or (1.0, 1.0, 1.0)
    if values.dtype == bool:
        values = values.astype(np.uint8)
    img = nib.Nifti1Image(np.asarray(values), np.diag(list(spacing) + [1.0]))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    nib.save(img, str(path))


def read_labels_csv(path) -> dict:
    """Map ``case_id`` to a raw label row (empty cells -> ``None``)."""
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, skipinitialspace=True)
        missing = {"case_id", "idh", "codeletion", "grade"} - set(reader.fieldnames or ())
        if missing:
            raise IngestionError(f"labels CSV {path} lacks columns {sorted(missing)}")
        for row in reader:
            rows[row["case_id"].strip()] = {
                k: (row[k].strip() or None) if row[k] is not None else None
                for k in ("idh", "codeletion", "grade")}
    return rows


def write_labels_csv(path, cases):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["case_id", "idh", "codeletion", "grade"])
        for case in cases:
            labels = case.labels if isinstance(case, Case) else case[1]
            case_id = case.case_id if isinstance(case, Case) else case[0]
            writer.writerow([case_id] + [labels.category(o) or "" for o in ("idh", "codeletion", "grade")])


def _parse_labels_row(labels_row) -> LabelSet:
    if labels_row is None:
        return LabelSet()
    if isinstance(labels_row, LabelSet):
        return labels_row
    if isinstance(labels_row, str):
        cells = [c.strip() or None for c in labels_row.split(",")]
        cells += [None] * (3 - len(cells))
        labels_row = dict(zip(("idh", "codeletion", "grade"), cells[:3]))
    return encode_labelset(labels_row)


def load_case(dir_path, labels_row=None, case_id=None) -> Case:
    """Load the four contrasts (and an optional ``seg`` mask) from a directory.

    ``labels_row`` may be a mapping, a LabelSet, or a comma-separated string in
    ``idh,codeletion,grade`` order such as ``"mutated,, II"``.
    """
    directory = Path(dir_path)
    if not directory.is_dir():
        raise IngestionError(f"case directory {directory} does not exist")
    found, absent = {}, []
    for channel, stem in CHANNEL_FILES.items():
        path = _find_volume(directory, stem)
        if path is None:
            absent.append(channel)
        else:
            found[channel] = path
    if absent:
        raise IngestionError(
            f"case {directory.name}: missing channel file(s) for {', '.join(absent)}")
    channels = tuple(read_volume(found[c]) for c in CHANNELS)
    mask_path = _find_volume(directory, MASK_FILE)
    segmentation, source = None, SegmentationSource.NONE
    if mask_path is not None:
        raw = read_volume(mask_path)
        segmentation = collapse_labels(raw)
        source = SegmentationSource.MANUAL
        marker = directory / "seg_source.txt"
        if marker.exists():
            source = SegmentationSource(marker.read_text().strip())
    return Case(case_id or directory.name, channels, _parse_labels_row(labels_row),
                segmentation, source)


def save_case(case: Case, dir_path):
    directory = Path(dir_path)
    directory.mkdir(parents=True, exist_ok=True)
    for channel, vol in zip(CHANNELS, case.channels):
        write_volume(vol, directory / f"{CHANNEL_FILES[channel]}.nii.gz")
    if case.segmentation is not None:
        write_volume(case.segmentation, directory / f"{MASK_FILE}.nii.gz")
        if case.segmentation_source is SegmentationSource.AUTOMATIC:
            (directory / "seg_source.txt").write_text("automatic\n")


# -- the chain ----------------------------------------------------------------

def normalize_in_mask(volume: VolumeGrid, mask: VolumeGrid, eps=1e-8):
    """Zero mean / unit std inside the brain mask; background set to the in-mask minimum.

    Returns ``(volume, degenerate)``. A constant in-mask image (std <= eps)
    yields an all-zero volume with ``degenerate=True``.
    """
    m = np.asarray(mask.values if isinstance(mask, VolumeGrid) else mask).astype(bool)
    if m.shape != volume.shape:
        raise PreprocessError(f"mask shape {m.shape} != volume shape {volume.shape}")
    if not m.any():
        raise PreprocessError("brain mask is empty")
    values = np.asarray(volume.values, dtype=np.float64)
    inside = values[m]
    mean, std = inside.mean(), inside.std()
    if std <= eps:
        return volume.with_values(np.zeros_like(values), VolumeKind.INTENSITY), True
    out = (values - mean) / std
    out[~m] = out[m].min()
    return volume.with_values(out, VolumeKind.INTENSITY), False


def mask_bbox(mask):
    m = np.asarray(mask).astype(bool)
    if not m.any():
        raise PreprocessError("cannot crop to an empty mask")
    lo, hi = [], []
    for axis in range(m.ndim):
        other = tuple(a for a in range(m.ndim) if a != axis)
        idx = np.flatnonzero(m.any(axis=other))
        lo.append(int(idx[0]))
        hi.append(int(idx[-1]) + 1)
    return tuple(lo), tuple(hi)


def crop_to_mask_bbox(volumes, mask):
    """Crop every volume to the tight bounding box of ``mask``.

    Returns ``(cropped, offset)``; :func:`uncrop` maps results back.
    """
    m = mask.values if isinstance(mask, VolumeGrid) else mask
    lo, hi = mask_bbox(m)
    box = tuple(slice(a, b) for a, b in zip(lo, hi))
    out = []
    for v in volumes:
        if v.shape != np.shape(m):
            raise PreprocessError(f"volume shape {v.shape} != mask shape {np.shape(m)}")
        out.append(v.with_values(v.values[box]) if isinstance(v, VolumeGrid) else np.asarray(v)[box])
    return out, lo


def uncrop(values, offset, full_shape, fill=0):
    out = np.full(full_shape, fill, dtype=np.asarray(values).dtype)
    box = tuple(slice(o, o + n) for o, n in zip(offset, np.shape(values)))
    out[box] = values
    return out


def median_smooth_mask(mask):
    """3x3x3 median filter with zero padding; the output stays binary."""
    values = mask.values if isinstance(mask, VolumeGrid) else mask
    out = ndimage.median_filter(np.asarray(values, dtype=np.uint8), size=3,
                                mode="constant", cval=0)
    if isinstance(mask, VolumeGrid):
        return mask.with_values(out, VolumeKind.BINARY_MASK)
    return out


def collapse_labels(multilabel_mask):
    """All positive labels become foreground."""
    values = multilabel_mask.values if isinstance(multilabel_mask, VolumeGrid) else multilabel_mask
    values = np.asarray(values)
    if values.size and values.min() < 0:
        raise PreprocessError("label volume contains negative values")
    out = (values > 0).astype(np.uint8)
    if isinstance(multilabel_mask, VolumeGrid):
        return multilabel_mask.with_values(out, VolumeKind.BINARY_MASK)
    return out


def run_external_stage(stage, template, volume: VolumeGrid, workdir=None) -> VolumeGrid:
    """Run a command template with ``{input}``/``{output}`` placeholders on one volume."""
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        src, dst = Path(tmp) / "input.nii.gz", Path(tmp) / "output.nii.gz"
        write_volume(volume, src)
        cmd = [part.format(input=src, output=dst) for part in shlex.split(template)]
        log.info("running %s: %s", stage, " ".join(cmd))
        result = subprocess.run(cmd, capture_output=True, text=True)
        if result.returncode != 0 or not dst.exists():
            raise PreprocessError(
                f"external {stage} failed ({result.returncode}): {result.stderr.strip()}")
        return read_volume(dst, volume.kind)


def preprocess_case(case: Case, config: PreprocessConfig, brain_mask=None, training=False):
    """Apply the full chain to one case.

    Returns ``(case, info)``; ``info`` records the crop offset, original shape
    and which channels had a degenerate intensity distribution.
    """
    channels = list(case.channels)
    for stage in EXTERNAL_STAGES:
        template = config.external_stage_commands.get(stage)
        if template:
            channels = [run_external_stage(stage, template, c) for c in channels]
    if brain_mask is None and config.brain_mask_path:
        brain_mask = read_volume(config.brain_mask_path, VolumeKind.BINARY_MASK)
    if brain_mask is None:
        # pre-stripped input: everything nonzero in any channel is brain
        brain = np.zeros(case.shape, dtype=np.uint8)
        for c in channels:
            brain |= (np.asarray(c.values) != 0).astype(np.uint8)
        brain_mask = VolumeGrid(brain, case.spacing, VolumeKind.BINARY_MASK)
    elif not isinstance(brain_mask, VolumeGrid):
        brain_mask = VolumeGrid(np.asarray(brain_mask).astype(np.uint8), case.spacing,
                                VolumeKind.BINARY_MASK)
    volumes = channels + ([case.segmentation] if case.segmentation is not None else [])
    if config.target_crop == "brain_mask_bbox":
        cropped, offset = crop_to_mask_bbox(volumes + [brain_mask], brain_mask)
        brain_cropped = cropped.pop()
    elif config.target_crop == "none":
        cropped, offset, brain_cropped = volumes, (0, 0, 0), brain_mask
    else:
        raise PreprocessError(f"unknown target_crop policy {config.target_crop!r}")
    normalized, degenerate = [], []
    for name, vol in zip(CHANNELS, cropped[:4]):
        vol, flag = normalize_in_mask(vol, brain_cropped, config.normalization_epsilon)
        normalized.append(vol.with_values(vol.values.astype(np.float32)))
        if flag:
            log.warning("case %s: %s has constant intensity inside the brain mask",
                        case.case_id, name)
            degenerate.append(name)
    seg = None
    if case.segmentation is not None:
        seg = collapse_labels(cropped[4])
        if training and config.smooth_training_masks:
            seg = median_smooth_mask(seg)
    out = case.replace(channels=tuple(normalized), segmentation=seg)
    info = {"case_id": case.case_id, "original_shape": list(case.shape), "offset": list(offset),
            "shape": list(out.shape), "spacing": list(case.spacing),
            "degenerate_channels": degenerate,
            "smoothed_mask": bool(seg is not None and training and config.smooth_training_masks),
            "segmentation_source": out.segmentation_source.value}
    return out, info


# -- bundles -------------------------------------------------------------------

def save_bundle(case: Case, info: dict, directory, float16=False):
    """Write ``<id>.npz`` tensors and a ``<id>.json`` sidecar manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    image = case.image(np.float16 if float16 else np.float32)
    arrays = {"image": image}
    for name in ("idh", "codeletion", "grade"):
        arrays[f"label_{name}"] = case.labels.row(name).astype(np.float32)
    if case.segmentation is not None:
        arrays["mask"] = np.asarray(case.segmentation.values, dtype=np.uint8)
    np.savez_compressed(directory / f"{case.case_id}.npz", **arrays)
    manifest = dict(info, dtype=str(image.dtype),
                    labels={n: case.labels.category(n) for n in ("idh", "codeletion", "grade")})
    (directory / f"{case.case_id}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_bundle(npz_path) -> Sample:
    npz_path = Path(npz_path)
    with np.load(npz_path) as data:
        image = data["image"].astype(np.float32)
        labels = LabelSet(**{n: data[f"label_{n}"] for n in ("idh", "codeletion", "grade")})
        mask = data["mask"] if "mask" in data.files else None
    return Sample(npz_path.stem, image, labels, mask)


def load_bundles(directory):
    paths = sorted(Path(directory).glob("*.npz"))
    if not paths:
        raise IngestionError(f"no preprocessed bundles in {directory}")
    return [load_bundle(p) for p in paths]


def load_dataset(root, labels_csv=None):
    """Load every case directory under ``root/cases`` with labels from the CSV."""
    root = Path(root)
    case_root = root / "cases" if (root / "cases").is_dir() else root
    labels = read_labels_csv(labels_csv or root / "labels.csv") if (labels_csv or (root / "labels.csv").exists()) else {}
    cases = []
    for d in sorted(p for p in case_root.iterdir() if p.is_dir()):
        cases.append(load_case(d, labels.get(d.name)))
    if not cases:
        raise IngestionError(f"no case directories under {case_root}")
    return cases
