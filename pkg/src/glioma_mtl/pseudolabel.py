"""Iterative pseudo-labelling of cases that have no segmentation.

A segmentation-only network is trained on the accepted set, it segments the
remaining cases, and a quality gate decides which of those segmentations are
kept. Accepted cases join the training set for the next round.
"""

from __future__ import annotations

import logging
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_model import Case, SegmentationSource, VolumeGrid, VolumeKind
from .errors import ConfigError
from .metrics import dice_score

log = logging.getLogger(__name__)


class AcceptAll:
    def __call__(self, mask, case):
        return True


class RejectAll:
    def __call__(self, mask, case):
        return False


class DiceThresholdGate:
    """Accept when DICE against a reference mask reaches ``threshold``.

    ``references`` maps case ids to reference masks; cases without one are
    rejected.
    """

    def __init__(self, references, threshold=0.7):
        self.references = dict(references)
        self.threshold = float(threshold)

    def __call__(self, mask, case):
        ref = self.references.get(case.case_id)
        if ref is None:
            return False
        return dice_score(mask, ref) >= self.threshold


class CommandGate:
    """Delegate the decision to an external program.

    ``command`` may contain ``{mask}`` (path of the proposed mask as
    ``.nii.gz``) and ``{case_id}``; exit status 0 means accept.
    """

    def __init__(self, command, timeout=600):
        if not command:
            raise ConfigError("CommandGate needs a command")
        self.command = command
        self.timeout = timeout

    def __call__(self, mask, case):
        from .preprocess import write_volume

        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / f"{case.case_id}.nii.gz"
            write_volume(np.asarray(mask, dtype=np.uint8), path, case.spacing)
            argv = [a.format(mask=str(path), case_id=case.case_id)
                    for a in shlex.split(self.command)]
            return subprocess.run(argv, timeout=self.timeout).returncode == 0


GATES = {"accept_all": AcceptAll, "reject_all": RejectAll, "dice": DiceThresholdGate,
         "command": CommandGate}


@dataclass
class PseudoLabelResult:
    cases: list
    rounds: list = field(default_factory=list)
    remaining: list = field(default_factory=list)
    stalled: bool = False


def pseudo_label_loop(labeled, unlabeled, gate, train_fn, predict_fn, max_rounds=None):
    """Grow the segmented set until every case is accepted or a round accepts none.

    ``train_fn(cases) -> model`` and ``predict_fn(model, case) -> mask``.
    Accepted cases get their predicted mask with source ``automatic``.
    """
    labeled = list(labeled)
    if not labeled:
        raise ConfigError("pseudo-labelling needs at least one segmented case")
    missing = [c.case_id for c in labeled if c.segmentation is None]
    if missing:
        raise ConfigError(f"labeled cases without a segmentation: {missing[:5]}")
    accepted = list(labeled)
    pending = list(unlabeled)
    result = PseudoLabelResult(accepted)
    round_no = 0
    while pending:
        if max_rounds is not None and round_no >= max_rounds:
            break
        round_no += 1
        model = train_fn(accepted)
        taken, still = [], []
        for case in pending:
            mask = np.asarray(predict_fn(model, case), dtype=np.uint8)
            if gate(mask, case):
                seg = VolumeGrid(mask, case.spacing, VolumeKind.BINARY_MASK)
                taken.append(case.replace(segmentation=seg,
                                          segmentation_source=SegmentationSource.AUTOMATIC))
            else:
                still.append(case)
        accepted.extend(taken)
        pending = still
        result.rounds.append({"round": round_no, "candidates": len(taken) + len(still),
                              "accepted": len(taken), "total_accepted": len(accepted),
                              "accepted_ids": [c.case_id for c in taken]})
        log.info("pseudo-label round %d: accepted %d of %d", round_no, len(taken),
                 len(taken) + len(still))
        if not taken:
            result.stalled = True
            log.warning("pseudo-label loop stalled: %d cases never accepted", len(still))
            break
    result.remaining = pending
    return result


def segmentation_trainer(network_spec, train_config, augment_config=None):
    """A ``train_fn`` that fits a segmentation-only PS-Net on preprocessed cases."""

    def train_fn(cases):
        from .augment import AugmentConfig
        from .data_model import Sample
        from .network import NetworkSpec, build_psnet
        from .trainer import train

        spec = NetworkSpec.from_json(network_spec.to_json())
        spec.classification_heads = {}
        model = build_psnet(spec, seed=train_config.seed)
        samples = [Sample.from_case(c) for c in cases]
        aug = augment_config or AugmentConfig(probability=0.0, factor=1)
        return train(model, samples, None, train_config, aug).model

    return train_fn


def predict_mask(model, case: Case):
    """Largest-component binary mask predicted for one preprocessed case."""
    from .network import forward
    from .postprocess import final_segmentation

    out = forward(model, case.image()[None])
    return final_segmentation(out["seg_probabilities"][0, 1].numpy())
