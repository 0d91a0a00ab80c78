import numpy as np
import pytest
from PIL import Image

from densegrade import functional as F
from densegrade.gradcam import (
    blend_overlay, cam, capture, colorize, explain, normalize_map, peak_location, render_overlay,
    save_heatmap,
)
from densegrade.model import build_model, preset
from densegrade.tensor import Tensor, default_dtype


def brute_cam(a, g):
    c, h, w = a.shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            s = 0.0
            for ch in range(c):
                s += (g[ch].sum() / (h * w)) * a[ch, y, x]
            out[y, x] = max(s, 0.0)
    return out


class StubNet:
    """Strided 1x1 conv, ReLU, global pool, linear head: enough to force a peak."""

    def __init__(self, head):
        self.training = False
        self.conv = Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
        self.head = Tensor(np.asarray(head, dtype=np.float64), requires_grad=True)

    def forward(self, x, taps=None):
        h = F.relu(F.conv2d(x, self.conv, stride=2))
        if taps is not None:
            taps["features"] = h
        return F.linear(F.global_avg_pool(h), self.head)

    def train(self, mode=True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        self.conv.grad = self.head.grad = None


def test_cam_unit_weights_is_relu():
    a = np.random.default_rng(0).standard_normal((1, 5, 4))
    np.testing.assert_array_equal(cam(a, np.ones_like(a)), np.maximum(a[0], 0))


def test_cam_negative_weights_clip_to_zero():
    a = np.random.default_rng(1).random((2, 3, 3))
    assert not cam(a, -np.ones_like(a)).any()


@pytest.mark.parametrize("seed", range(5))
def test_cam_brute_force(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 6, 5))
    g = rng.standard_normal((3, 6, 5))
    np.testing.assert_allclose(cam(a, g), brute_cam(a, g), atol=1e-6)


def test_cam_linear_before_clip():
    rng = np.random.default_rng(2)
    a1, a2, g = (rng.standard_normal((4, 3, 3)) for _ in range(3))
    np.testing.assert_allclose(cam(a1 + a2, g, clip=False), cam(a1, g, clip=False) + cam(a2, g, clip=False),
                               atol=1e-12)


def test_cam_shape_errors():
    with pytest.raises(ValueError):
        cam(np.zeros((2, 3, 3)), np.zeros((2, 3, 4)))
    with pytest.raises(ValueError):
        cam(np.zeros((3, 3)), np.zeros((3, 3)))


def test_forced_peak_on_constructed_model():
    x = np.zeros((1, 8, 8))
    x[0, 2, 4] = 5.0  # strided map cell (1, 2)
    with default_dtype(np.float64):
        hm = explain(StubNet([[1.0, -1.0]]), x, target=0)
    assert hm.raw.shape == (4, 4)
    assert np.argwhere(hm.raw > 0).tolist() == [[1, 2]]
    assert hm.peak == (3, 5)  # centre of cell (1, 2) at 2x upsampling
    assert hm.values.shape == (8, 8) and hm.values.max() == 1.0 and hm.values.min() >= 0
    # the class with a negative head weight sees no positive evidence
    with default_dtype(np.float64):
        assert explain(StubNet([[1.0, -1.0]]), x, target=1).is_zero


def test_peak_location_maps_cell_centres():
    raw = np.zeros((4, 4))
    raw[0, 0] = 1
    assert peak_location(raw, (32, 32)) == (4, 4)
    raw[:] = 0
    raw[3, 3] = 1
    assert peak_location(raw, (32, 32)) == (28, 28)
    assert peak_location(np.ones((1, 1)), (7, 9)) == (3, 4)


def test_zero_input_on_fresh_model_gives_flagged_zero_map(tiny_model):
    hm = explain(tiny_model, np.zeros((3, 32, 32), dtype=np.float32))
    assert hm.is_zero and not hm.values.any() and hm.values.shape == (32, 32)


def _final_hw(cfg):
    h = cfg.input_resolution[0]
    h = (h + 2 * 3 - 7) // 2 + 1  # stem conv
    h = (h + 2 * 1 - 3) // 2 + 1  # stem pool
    for _ in range(len(cfg.block_layout) - 1):
        h //= 2
    return h


def test_capture_shape_and_no_side_effects(tiny_model):
    tiny_model.eval()
    x = np.random.default_rng(0).standard_normal((2, 3, 32, 32)).astype(np.float32)
    x[1] = x[0]
    acts, logits = capture(tiny_model, x)
    side = _final_hw(tiny_model.config)
    assert side == 4 and acts.shape == (2, tiny_model.config.feature_width(), side, side)
    assert np.array_equal(acts.data[0], acts.data[1])
    assert np.array_equal(logits.data, tiny_model(Tensor(x)).data)
    with pytest.raises(ValueError, match="available"):
        capture(tiny_model, x, layer="nope")
    tiny_model.train()


def test_explain_properties_and_state(tiny_model):
    tiny_model.train()
    rng = np.random.default_rng(3)
    for i in range(4):
        img = rng.standard_normal((3, 32, 32)).astype(np.float32)
        for sig in ("logit", "loss"):
            hm = explain(tiny_model, img, target=i, signal=sig, layer="block2.layer2.conv2")
            assert hm.values.shape == (32, 32) and hm.values.min() >= 0
            assert hm.is_zero or hm.values.max() == 1.0
            assert hm.target_class == i and hm.source_layer == "block2.layer2.conv2"
    assert tiny_model.training
    assert all(p.grad is None for p in tiny_model.params.values())
    with pytest.raises(ValueError):
        explain(tiny_model, img, target=18)
    with pytest.raises(ValueError):
        explain(tiny_model, img, signal="prob")


def test_logit_scaling_invariance():
    img = np.random.default_rng(4).standard_normal((3, 32, 32)).astype(np.float32)
    with default_dtype(np.float64):
        model64 = build_model(preset("tiny", 18, (32, 32, 3)), 4)
        a = explain(model64, img.astype(np.float64), target=5)
        model64.head_weight.data *= 3.0
        model64.head_bias.data *= 3.0
        b = explain(model64, img.astype(np.float64), target=5)
    np.testing.assert_allclose(b.raw, 3.0 * a.raw, rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(b.values, a.values, atol=1e-10)
    assert a.peak == b.peak


def test_normalize_map_flag():
    values, zero = normalize_map(np.zeros((2, 2)), (8, 8))
    assert zero and values.shape == (8, 8) and not values.any()
    values, zero = normalize_map(np.array([[0.0, 2.0], [1.0, 0.5]]), (6, 6))
    assert not zero and values.max() == 1.0


def test_overlay_of_zero_heatmap_is_dimmed_input(tmp_path):
    img = np.random.default_rng(5).random((9, 7, 3))
    out = blend_overlay(img, np.zeros((9, 7)), alpha=0.4)
    expected = (np.clip(0.6 * img, 0, 1) * 255 + 0.5).astype(np.uint8)
    assert out.shape == (9, 7, 3) and np.array_equal(out, expected)


def test_overlay_bytes_deterministic(tmp_path):
    rng = np.random.default_rng(6)
    img, hm = rng.random((12, 10, 3)), rng.random((12, 10))
    render_overlay(img, hm, tmp_path / "a.png")
    render_overlay(img, hm, tmp_path / "b.png")
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    with Image.open(tmp_path / "a.png") as im:
        assert im.size == (10, 12)
    save_heatmap(hm, tmp_path / "h.png")
    with Image.open(tmp_path / "h.png") as im:
        assert im.mode == "L" and im.size == (10, 12)


def test_overlay_errors(tmp_path):
    with pytest.raises(ValueError):
        blend_overlay(np.zeros((4, 4, 3)), np.zeros((5, 4)))
    with pytest.raises(ValueError):
        colorize(np.zeros((2, 2)), "jet")
    with pytest.raises(OSError):
        render_overlay(np.zeros((4, 4, 3)), np.zeros((4, 4)), tmp_path / "missing" / "x.png")


def test_colormaps_start_black_and_end_white():
    ends = colorize(np.array([[0.0, 1.0]]))
    assert ends[0, 0].tolist() == [0, 0, 0] and ends[0, 1].tolist() == [1, 1, 1]
    assert colorize(np.array([[0.5]]), "gray")[0, 0].tolist() == [0.5, 0.5, 0.5]
