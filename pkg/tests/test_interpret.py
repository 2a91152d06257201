import numpy as np
import pytest
import torch

from glioma_mtl.errors import ConfigError
from glioma_mtl.interpret import filter_outputs, smoothgrad_saliency
from glioma_mtl.network import NetworkSpec, build_psnet


@pytest.fixture(scope="module")
def model():
    spec = NetworkSpec(input_shape=(12, 15, 12, 4), depths=2, filter_schedule=[4, 6])
    return build_psnet(spec, seed=1).eval()


@pytest.fixture(scope="module")
def image():
    return np.random.default_rng(0).normal(size=(4, 12, 15, 12)).astype(np.float32)


def plain_gradient(model, image, head):
    x = torch.as_tensor(image)[None].requires_grad_(True)
    logits = model(x, logits=True)[f"{head}_scores"][0]
    logits[int(torch.argmax(logits.detach()))].backward()
    return x.grad[0].abs().numpy()


def test_noise_free_single_pass_is_plain_gradient(model, image):
    got = np.stack([v.values for v in smoothgrad_saliency(model, image, "grade", 1, 0.0)])
    assert got.shape == image.shape
    assert np.allclose(got, plain_gradient(model, image, "grade"), atol=1e-7)


def test_noise_free_average_does_not_depend_on_count(model, image):
    one = smoothgrad_saliency(model, image, "idh", 1, 0.0)
    five = smoothgrad_saliency(model, image, "idh", 5, 0.0)
    assert all(np.allclose(a.values, b.values, atol=1e-7) for a, b in zip(one, five))


def test_seeded_noise_is_reproducible(model, image):
    a = smoothgrad_saliency(model, image, "codeletion", 3, 0.15, seed=2)
    b = smoothgrad_saliency(model, image, "codeletion", 3, 0.15, seed=2)
    c = smoothgrad_saliency(model, image, "codeletion", 3, 0.15, seed=3)
    assert all(np.array_equal(x.values, y.values) for x, y in zip(a, b))
    assert not all(np.array_equal(x.values, y.values) for x, y in zip(a, c))


def test_constant_head_has_zero_saliency(image):
    spec = NetworkSpec(input_shape=(12, 15, 12, 4), depths=2, filter_schedule=[4, 6])
    m = build_psnet(spec, seed=1).eval()
    with torch.no_grad():
        m.layer("heads.idh").weight.zero_()
    out = smoothgrad_saliency(m, image, "idh", 2, 0.1)
    assert all(not v.values.any() for v in out)


def test_saliency_errors(model, image):
    with pytest.raises(ConfigError):
        smoothgrad_saliency(model, image, "idh", 0)
    with pytest.raises(ConfigError):
        smoothgrad_saliency(model, image, "histology")


@pytest.mark.parametrize("role", ["stem", "encoder_conv", "up_conv", "decoder_conv",
                                  "final_deconv", "segmentation_head"])
def test_filter_count_and_shape_follow_registry(model, image, role):
    name = next(k for k, v in model.registry.items() if v["role"] == role)
    maps = filter_outputs(model, image, name)
    shape = model.registry[name]["shape"]
    assert len(maps) == shape[3]
    assert all(m.shape == tuple(shape[:3]) for m in maps)


def test_stem_on_zero_input_is_its_bias(model):
    maps = filter_outputs(model, np.zeros((4, 12, 15, 12), np.float32), "stem")
    bias = model.layer("stem").bias.detach().numpy()
    assert all(np.allclose(m.values, b) for m, b in zip(maps, bias))
    assert maps[0].spacing == (3.0, 3.0, 3.0)


def test_filter_outputs_repeatable(model, image):
    a = filter_outputs(model, image, "stem")
    b = filter_outputs(model, image, "stem")
    assert all(np.array_equal(x.values, y.values) for x, y in zip(a, b))


def test_unknown_layer(model, image):
    with pytest.raises(ConfigError, match="available"):
        filter_outputs(model, image, "conv99")
    with pytest.raises(ConfigError):
        filter_outputs(model, image, "tap.0")


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="measured 0.37 of the mass near the lesion (the region "
                   "is 14% of the brain): enriched about 2.8x but below the pre-set 0.60 bar")
def test_trained_saliency_concentrates_on_the_lesion(toy_e2e):
    # the co-deletion cue is a rim just outside the lesion; the neighbourhood
    # (4 dilations, 6-connected) and the 60% bar were fixed before running
    from scipy import ndimage

    model = toy_e2e["model"]
    fractions = []
    for sample, truth, case in zip(toy_e2e["test"], toy_e2e["test_truths"],
                                   toy_e2e["test_cases"]):
        if truth["labels"].category("codeletion") != "co-deleted":
            continue
        maps = smoothgrad_saliency(model, sample, "codeletion", 25, 0.15)
        mass = sum(np.asarray(m.values, dtype=np.float64) for m in maps)
        region = ndimage.binary_dilation(np.asarray(case.segmentation.values, bool),
                                         iterations=4)
        fractions.append(mass[region].sum() / mass.sum())
    assert fractions
    print(f"\nsaliency mass within dilated lesion: mean {np.mean(fractions):.3f} "
          f"over {len(fractions)} cases")
    assert np.mean(fractions) >= 0.60
