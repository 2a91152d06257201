import numpy as np
import pytest
from hypothesis import given, strategies as st

from glioma_mtl.data_model import (VOCABULARY, Case, LabelSet, PredictionRecord, VolumeGrid,
                                   VolumeKind, decode_labelset, encode_labelset, validate_case)
from glioma_mtl.errors import VocabularyError
from glioma_mtl.postprocess import build_prediction_record


def _case(shape=(16, 16, 16), **kw):
    chans = [VolumeGrid(np.zeros(shape, np.float32)) for _ in range(4)]
    return Case("c0", chans, **kw)


def test_encode_partial_unknown():
    ls = encode_labelset({"idh": "mutated", "codeletion": None, "grade": "II"})
    assert ls.idh.tolist() == [0, 1]
    assert ls.codeletion.tolist() == [0, 0]
    assert ls.grade.tolist() == [1, 0, 0]


def test_encode_all_known():
    ls = encode_labelset({"idh": "wildtype", "codeletion": "co-deleted", "grade": "IV"})
    assert (ls.idh.tolist(), ls.codeletion.tolist(), ls.grade.tolist()) == \
        ([1, 0], [0, 1], [0, 0, 1])


def test_encode_rejects_unlisted_category():
    with pytest.raises(VocabularyError) as exc:
        encode_labelset({"idh": "Mutant"})
    assert "idh" in str(exc.value) and "Mutant" in str(exc.value)


label_maps = st.fixed_dictionaries(
    {name: st.one_of(st.none(), st.sampled_from(vocab)) for name, vocab in VOCABULARY.items()})


@given(label_maps)
def test_encode_decode_round_trip(raw):
    ls = encode_labelset(raw)
    assert decode_labelset(ls) == raw
    for name in VOCABULARY:
        assert ls.row(name).sum() in (0.0, 1.0)


def test_labelset_rejects_bad_rows():
    with pytest.raises(ValueError):
        LabelSet(idh=np.array([1.0, 1.0]))
    with pytest.raises(ValueError):
        LabelSet(grade=np.array([0.5, 0.5, 0.0]))


def test_labelset_is_read_only():
    ls = encode_labelset({"idh": "mutated"})
    with pytest.raises(ValueError):
        ls.idh[0] = 1


def test_validate_well_formed_case():
    assert validate_case(_case()) == []


def test_validate_shape_mismatch():
    chans = [VolumeGrid(np.zeros((16, 16, 16))) for _ in range(3)]
    chans.append(VolumeGrid(np.zeros((16, 16, 15))))
    found = validate_case(Case("c", chans))
    assert len(found) == 1 and found[0].startswith("channels[FLAIR]")


def test_validate_non_binary_mask():
    mask = np.zeros((16, 16, 16))
    mask[0, 0, 0] = 0.5
    case = _case(segmentation=VolumeGrid(mask, kind=VolumeKind.BINARY_MASK))
    found = validate_case(case)
    assert len(found) == 1 and found[0].startswith("segmentation")


def test_volume_grid_spacing_and_probability_violations():
    v = VolumeGrid(np.full((2, 2, 2), 1.5), spacing=(1, 0, 1), kind=VolumeKind.PROBABILITY)
    found = v.violations()
    assert [f.split(":")[0] for f in found] == ["volume.spacing", "volume.values"]
    with pytest.raises(ValueError):
        VolumeGrid(np.zeros((2, 2)))


def test_case_segmentation_source_follows_mask():
    assert _case().segmentation_source.value == "none"
    seg = VolumeGrid(np.zeros((16, 16, 16), np.uint8), kind=VolumeKind.BINARY_MASK)
    assert _case(segmentation=seg).segmentation_source.value == "manual"


@given(st.lists(st.floats(0.01, 1.0), min_size=3, max_size=3))
def test_prediction_record_pair_sum(raw):
    g = np.asarray(raw) / np.sum(raw)
    rec = build_prediction_record("c", [0.4, 0.6], [0.9, 0.1], g)
    assert rec.lgg_hgg_scores == (g[0] + g[1], g[2])
    assert rec.violations() == []
    assert isinstance(rec, PredictionRecord)
