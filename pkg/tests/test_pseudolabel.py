import numpy as np
import pytest
from hypothesis import given, strategies as st

from glioma_mtl.data_model import SegmentationSource
from glioma_mtl.errors import ConfigError
from glioma_mtl.pseudolabel import (AcceptAll, CommandGate, DiceThresholdGate, RejectAll,
                                    pseudo_label_loop)
from glioma_mtl.synthdata import PhantomSpec, generate


@pytest.fixture(scope="module")
def phantoms():
    spec = PhantomSpec(seed=6, missingness={"segmentation": 0.6})
    cases, truths = generate(spec, 16, with_truth=True)
    refs = {c.case_id: t["mask"] for c, t in zip(cases, truths)}
    labeled = [c for c in cases if c.segmentation is not None]
    unlabeled = [c for c in cases if c.segmentation is None]
    return labeled, unlabeled, refs


def degraded_predictor(refs, difficulty):
    """The "model" is the training-set size; a case's prediction keeps a
    fraction of its reference lesion that grows with that size."""

    def predict(n_train, case):
        ref = refs[case.case_id]
        keep = min(1.0, n_train / difficulty[case.case_id])
        idx = np.flatnonzero(ref)
        out = np.zeros(ref.size, np.uint8)
        out[idx[: int(round(keep * idx.size))]] = 1
        return out.reshape(ref.shape)

    return predict


def test_accept_all_finishes_in_one_round(phantoms):
    labeled, unlabeled, refs = phantoms
    res = pseudo_label_loop(labeled, unlabeled, AcceptAll(), len,
                            lambda m, c: refs[c.case_id])
    assert len(res.rounds) == 1 and not res.remaining and not res.stalled
    auto = [c for c in res.cases if c.segmentation_source is SegmentationSource.AUTOMATIC]
    assert len(auto) == len(unlabeled)


def test_reject_all_stalls_after_one_round(phantoms):
    labeled, unlabeled, refs = phantoms
    res = pseudo_label_loop(labeled, unlabeled, RejectAll(), len,
                            lambda m, c: refs[c.case_id])
    assert len(res.rounds) == 1 and res.stalled and len(res.remaining) == len(unlabeled)


@given(st.lists(st.integers(1, 40), min_size=10, max_size=10))
def test_dice_gate_grows_monotonically_and_stops(phantoms, difficulties):
    labeled, unlabeled, refs = phantoms
    difficulty = {c.case_id: d for c, d in zip(unlabeled, difficulties)}
    res = pseudo_label_loop(labeled, unlabeled, DiceThresholdGate(refs, 0.7), len,
                            degraded_predictor(refs, difficulty))
    totals = [r["total_accepted"] for r in res.rounds]
    assert totals == sorted(totals)
    assert len(res.rounds) <= len(unlabeled) + 1
    assert res.stalled or not res.remaining
    assert totals[-1] + len(res.remaining) == len(labeled) + len(unlabeled)


def test_max_rounds(phantoms):
    labeled, unlabeled, refs = phantoms
    difficulty = {c.case_id: 10 * (i + 1) for i, c in enumerate(unlabeled)}
    res = pseudo_label_loop(labeled, unlabeled, DiceThresholdGate(refs, 0.7), len,
                            degraded_predictor(refs, difficulty), max_rounds=1)
    assert len(res.rounds) == 1


def test_dice_gate_without_reference(phantoms):
    labeled, _, refs = phantoms
    gate = DiceThresholdGate({}, 0.7)
    assert not gate(refs[labeled[0].case_id], labeled[0])


def test_command_gate(phantoms, tmp_path):
    labeled, _, refs = phantoms
    case = labeled[0]
    assert CommandGate("true")(refs[case.case_id], case)
    assert not CommandGate("false")(refs[case.case_id], case)
    assert CommandGate("test -s {mask}")(refs[case.case_id], case)


def test_loop_input_errors(phantoms):
    labeled, unlabeled, refs = phantoms
    with pytest.raises(ConfigError):
        pseudo_label_loop([], unlabeled, AcceptAll(), len, lambda m, c: refs[c.case_id])
    with pytest.raises(ConfigError):
        pseudo_label_loop(unlabeled, [], AcceptAll(), len, lambda m, c: refs[c.case_id])
