import numpy as np
import pytest
import torch

from irisstyle.backbone import (IMAGENET_MEAN, IMAGENET_STD, TAP_CHANNELS, TAP_INDEX, BackboneError,
                                activations, init_backbone, input_gradient, load_backbone, prepare_input,
                                save_backbone)


def test_tap_channels(backbone):
    assert backbone.taps["relu4_1"].channels == 512
    expected = {"relu1_1": 64, "relu2_1": 128, "relu3_1": 256, "relu4_1": 512, "relu4_2": 512,
                "final_encoding": 512}
    assert {k: TAP_CHANNELS[k] for k in expected} == expected
    for name, idx in TAP_INDEX.items():
        layer = backbone.features[idx]
        assert isinstance(layer, torch.nn.ReLU if name != "final_encoding" else torch.nn.MaxPool2d)


def test_relu1_1_shape_and_finiteness(backbone):
    x = prepare_input(np.zeros((224, 224), np.float32))
    acts = activations(backbone, x, ["relu1_1", "final_encoding"])
    assert tuple(acts["relu1_1"].shape) == (64, 224, 224)
    assert tuple(acts["final_encoding"].shape) == (512, 7, 7)
    assert all(torch.isfinite(a).all() for a in acts.values())


def test_unknown_tap_is_error(backbone):
    with pytest.raises(BackboneError):
        activations(backbone, prepare_input(np.zeros((64, 64), np.float32), 64), ["relu9_9"])


def test_prepare_input_contract():
    crop = np.random.default_rng(0).uniform(size=(50, 70)).astype(np.float32)
    x = prepare_input(crop)
    assert tuple(x.shape) == (3, 224, 224)
    mean = torch.tensor(IMAGENET_MEAN).view(3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(3, 1, 1)
    raw = x * std + mean
    assert torch.allclose(raw[0], raw[1], atol=1e-6) and torch.allclose(raw[1], raw[2], atol=1e-6)
    square = np.random.default_rng(1).uniform(size=(64, 64)).astype(np.float32)
    raw = prepare_input(square, 64) * std + mean
    assert np.allclose(raw[0].numpy(), square, atol=1e-6)
    with pytest.raises(BackboneError):
        prepare_input(crop, 16)


def test_seeded_init_is_deterministic(backbone):
    other = init_backbone(42)
    assert other.checksum == backbone.checksum
    assert init_backbone(43).checksum != backbone.checksum
    x = prepare_input(np.random.default_rng(2).uniform(size=(64, 64)).astype(np.float32), 64)
    a = activations(backbone, x, ["relu3_1"])["relu3_1"]
    b = activations(other, x, ["relu3_1"])["relu3_1"]
    assert float((a - b).abs().max()) <= 1e-6


def test_weights_roundtrip(backbone, tmp_path):
    path = tmp_path / "vgg.pt"
    save_backbone(backbone, path)
    loaded = load_backbone(path)
    assert loaded.checksum == backbone.checksum


def test_env_variable_fallback(backbone, tmp_path, monkeypatch):
    path = tmp_path / "vgg.pt"
    save_backbone(backbone, path)
    monkeypatch.setenv("ISL_WEIGHTS", str(path))
    assert load_backbone().checksum == backbone.checksum


def test_truncated_weights_are_error(backbone, tmp_path):
    path = tmp_path / "vgg.pt"
    save_backbone(backbone, path)
    path.write_bytes(path.read_bytes()[:1000])
    with pytest.raises(BackboneError):
        load_backbone(path)


def test_topology_mismatch_lists_shapes(tmp_path):
    path = tmp_path / "bad.pt"
    state = dict(init_backbone(0).features.state_dict())
    state["0.weight"] = torch.zeros(32, 3, 3, 3)
    torch.save(state, path)
    with pytest.raises(BackboneError, match=r"0\.weight: expected \(64, 3, 3, 3\), found \(32, 3, 3, 3\)"):
        load_backbone(path)


def test_missing_weights_file_is_error(tmp_path):
    with pytest.raises(BackboneError):
        load_backbone(tmp_path / "absent.pt")


@pytest.fixture(scope="module")
def bb64(backbone):
    return backbone.to(torch.float64)


def test_gradient_zero_at_content_minimum(bb64):
    x = prepare_input(np.random.default_rng(3).uniform(size=(64, 64)), 64, torch.float64)
    target = activations(bb64, x, ["relu4_2"])["relu4_2"]
    g = input_gradient(bb64, x, lambda a: ((a["relu4_2"] - target) ** 2).mean(), ["relu4_2"])
    assert float(g.abs().max()) <= 1e-6


def test_gradient_of_constant_is_zero(bb64):
    x = prepare_input(np.random.default_rng(4).uniform(size=(64, 64)), 64, torch.float64)
    g = input_gradient(bb64, x, lambda a: torch.tensor(3.0, dtype=torch.float64), ["relu1_1"])
    assert float(g.abs().max()) == 0.0


def test_gradient_matches_finite_differences(bb64):
    gen = torch.Generator().manual_seed(0)
    x = torch.rand(3, 64, 64, generator=gen, dtype=torch.float64)
    obj = lambda a: a["relu1_1"].sum()
    g = input_gradient(bb64, x, obj, ["relu1_1"])
    rng = np.random.default_rng(0)
    # larger steps straddle relu kinks for some coordinates
    h = 1e-5
    for _ in range(20):
        c, i, j = int(rng.integers(3)), int(rng.integers(64)), int(rng.integers(64))
        xp, xm = x.clone(), x.clone()
        xp[c, i, j] += h
        xm[c, i, j] -= h
        fd = (float(obj(activations(bb64, xp, ["relu1_1"]))) - float(obj(activations(bb64, xm, ["relu1_1"])))) / (2 * h)
        an = float(g[c, i, j])
        assert abs(an - fd) <= 1e-3 * max(abs(an), abs(fd), 1e-12)
