import numpy as np
import pytest

from glioma_mtl.postprocess import largest_component
from glioma_mtl.preprocess import load_case
from glioma_mtl.synthdata import PhantomSpec, brain_mask, generate, write_dataset


def test_generation_is_deterministic():
    spec = PhantomSpec(seed=4)
    a, b = generate(spec, 3), generate(spec, 3)
    for x, y in zip(a, b):
        assert x.labels == y.labels
        assert all(np.array_equal(u.values, v.values) for u, v in zip(x.channels, y.channels))
    # an index yields the same phantom regardless of where generation starts
    late = generate(spec, 1, start=2)[0]
    assert np.array_equal(late.channels[0].values, a[2].channels[0].values)


def test_full_missingness_hides_everything():
    spec = PhantomSpec(missingness={"idh": 1.0, "codeletion": 1.0, "grade": 1.0,
                                    "segmentation": 1.0})
    cases, truths = generate(spec, 5, with_truth=True)
    for c, t in zip(cases, truths):
        assert not any(c.labels.is_known(n) for n in ("idh", "codeletion", "grade"))
        assert c.segmentation is None
        assert all(t["labels"].is_known(n) for n in ("idh", "codeletion", "grade"))


def test_priors_within_binomial_noise():
    n = 400
    _, truths = generate(PhantomSpec(seed=9), n, with_truth=True)
    idh = np.mean([t["labels"].index("idh") for t in truths])
    assert abs(idh - 0.4) < 4 * np.sqrt(0.4 * 0.6 / n)
    grade = np.bincount([t["labels"].index("grade") for t in truths], minlength=3) / n
    for p_hat, p in zip(grade, (0.3, 0.2, 0.5)):
        assert abs(p_hat - p) < 4 * np.sqrt(p * (1 - p) / n)


def test_lesion_is_one_component_inside_brain():
    spec = PhantomSpec(seed=2)
    bm = brain_mask(spec)
    _, truths = generate(spec, 10, with_truth=True)
    for t in truths:
        m = t["mask"]
        assert m.sum() > 0
        assert np.array_equal(largest_component(m), m)
        assert not (m & (1 - bm)).any()


def test_labels_are_visible_in_the_images():
    cases, truths = generate(PhantomSpec(seed=3), 40, with_truth=True)
    t2 = {0: [], 1: []}
    for c, t in zip(cases, truths):
        lesion = t["mask"].astype(bool)
        t2[t["labels"].index("idh")].append(c.channels[2].values[lesion].mean())
    assert min(t2[1]) > max(t2[0])


def test_bad_spec():
    with pytest.raises(ValueError):
        PhantomSpec(missingness={"idh": 1.5})
    with pytest.raises(ValueError):
        PhantomSpec(shape=(12, 12, 12))


def test_written_dataset_loads(tmp_path):
    cases, _ = write_dataset(PhantomSpec(seed=1), 2, tmp_path)
    assert (tmp_path / "labels.csv").exists() and (tmp_path / "truth_labels.csv").exists()
    back = load_case(tmp_path / "cases" / cases[0].case_id)
    assert np.allclose(back.channels[3].values, cases[0].channels[3].values)
