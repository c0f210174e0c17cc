import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sdnia.detector import DetectorConfig, build_targets, encode_box
from sdnia.imagery import BoundingBox
from sdnia.losses import (IdentityExtractor, LossWeights, VGGFeatures, bbox_ciou, combine_detection,
                          combine_restoration, combine_total, detection_loss, gram_matrix, l1_loss,
                          ms_ssim, ms_ssim_levels, resolve_extractor, restoration_loss, total_loss,
                          vgg_perceptual)

W = LossWeights()


def _rand(seed, shape=(1, 3, 32, 32)):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(*shape, generator=g, dtype=torch.float64)


# ---------------------------------------------------------------- l1

def test_l1_values():
    a = torch.zeros(1, 3, 8, 8, dtype=torch.float64)
    assert float(l1_loss(a, a)) == 0.0
    assert float(l1_loss(a, torch.ones_like(a))) == 1.0
    assert float(l1_loss(a + 0.2, a + 0.5)) == pytest.approx(0.3)


def test_l1_shape_mismatch():
    with pytest.raises(ValueError):
        l1_loss(torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 8, 9))


def test_l1_accepts_numpy_images():
    assert float(l1_loss(np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.5))) == pytest.approx(0.5)


# ---------------------------------------------------------------- ms-ssim

def test_levels_fit_rule():
    assert ms_ssim_levels(176, 176) == 5
    assert ms_ssim_levels(175, 400) == 4
    assert ms_ssim_levels(32, 32) == 2
    assert ms_ssim_levels(10, 10) == 0


def test_ms_ssim_self_is_one():
    x = _rand(0)
    assert float(ms_ssim(x, x)) == pytest.approx(1.0, abs=1e-9)
    assert float(1 - ms_ssim(x, x)) == pytest.approx(0.0, abs=1e-9)


def test_ms_ssim_symmetric():
    a, b = _rand(1), _rand(2)
    assert float(ms_ssim(a, b)) == pytest.approx(float(ms_ssim(b, a)), abs=1e-12)


def _constant_pair_closed_form(levels):
    # zero vs one images: every contrast-structure term is C2 / C2 = 1, and the
    # coarsest luminance term is C1 / (1 + C1); only that factor survives
    weights = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333][:levels])
    weights /= weights.sum()
    C1 = 0.01 ** 2
    return (C1 / (1 + C1)) ** weights[-1]


@pytest.mark.parametrize("size", [32, 64, 176])
def test_ms_ssim_constant_images_closed_form(size):
    a = torch.zeros(1, 3, size, size, dtype=torch.float64)
    b = torch.ones_like(a)
    expected = _constant_pair_closed_form(ms_ssim_levels(size, size))
    assert float(ms_ssim(a, b)) == pytest.approx(expected, rel=1e-9)


def test_ms_ssim_constant_images_collapse_at_toy_size():
    a = torch.zeros(1, 3, 32, 32, dtype=torch.float64)
    assert float(ms_ssim(a, torch.ones_like(a))) < 0.01


def test_ms_ssim_too_small():
    with pytest.raises(ValueError, match="need min side >= 176"):
        ms_ssim(_rand(0), _rand(1), levels=5)
    with pytest.raises(ValueError, match="too small"):
        ms_ssim(_rand(0, (1, 3, 8, 8)), _rand(1, (1, 3, 8, 8)))


@given(st.integers(0, 10_000), st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_ms_ssim_at_most_one(s1, s2):
    a, b = _rand(s1, (1, 3, 24, 24)), _rand(s2, (1, 3, 24, 24))
    v = float(ms_ssim(a, b))
    assert v <= 1.0 + 1e-12
    if s1 != s2:
        assert v < 1.0 - 1e-9


# ---------------------------------------------------------------- gram / perceptual

def test_gram_zero_and_constant():
    assert torch.equal(gram_matrix(torch.zeros(4, 3, 3)), torch.zeros(4, 4))
    g = gram_matrix(torch.full((1, 2, 2), 2.0))
    assert g.tolist() == [[4.0]]


def test_gram_symmetric_psd():
    f = torch.randn(6, 5, 7, dtype=torch.float64)
    g = gram_matrix(f)
    assert torch.allclose(g, g.T)
    assert torch.linalg.eigvalsh(g).min() > -1e-12


def test_gram_batched_matches_single():
    f = torch.randn(2, 4, 3, 3)
    assert torch.allclose(gram_matrix(f)[1], gram_matrix(f[1]))


def test_perceptual_identity_extractor():
    ext = IdentityExtractor()
    a = torch.zeros(1, 3, 8, 8, dtype=torch.float64)
    c, s = vgg_perceptual(a, a, ext)
    assert float(c) == 0 and float(s) == 0
    c, _ = vgg_perceptual(a, torch.ones_like(a), ext)
    assert float(c) == 1.0


def test_style_term_ignores_spatial_permutation():
    ext = IdentityExtractor()
    a, b = _rand(3, (1, 3, 8, 8)), _rand(4, (1, 3, 8, 8))
    perm = torch.randperm(64, generator=torch.Generator().manual_seed(0))
    b_perm = b.flatten(2)[..., perm].reshape(b.shape)
    _, s1 = vgg_perceptual(a, b, ext)
    _, s2 = vgg_perceptual(a, b_perm, ext)
    assert float(s1) == pytest.approx(float(s2), rel=1e-12)


def test_no_extractor_gives_zero():
    a = _rand(0)
    c, s = vgg_perceptual(a, 1 - a, None)
    assert float(c) == 0 and float(s) == 0


def test_vgg_structure_random_weights():
    ext = VGGFeatures(weights=None)
    feats = ext(torch.rand(1, 3, 32, 32))
    assert set(feats) == {"relu1_2", "relu2_2", "relu3_3", "relu4_3"}
    assert feats["relu3_3"].shape[1] == 256
    a = torch.rand(1, 3, 32, 32)
    c, s = vgg_perceptual(a, a, ext)
    assert float(c) == 0 and float(s) == 0


def test_vgg_unavailable_falls_back_loudly(tmp_path):
    with pytest.warns(RuntimeWarning, match="perceptual loss disabled"):
        assert resolve_extractor("vgg", weights=str(tmp_path / "missing.pth")) is None
    with pytest.raises(Exception):
        resolve_extractor("vgg", weights=str(tmp_path / "missing.pth"), fallback=False)


# ---------------------------------------------------------------- weighted sums

def test_restoration_weights_arithmetic():
    assert combine_restoration(0.4, 0.2, 0.06, 0.04, W) == pytest.approx(0.20, abs=1e-15)
    assert combine_restoration(1, 1, 1, 1, W) == 1.5
    doubled = LossWeights(gamma_res=1.0)
    assert combine_restoration(0, 0, 0.3, 0.1, doubled) == 2 * combine_restoration(0, 0, 0.3, 0.1, W)


def test_detection_and_total_arithmetic():
    assert combine_detection(1, 1, 1, W) == pytest.approx(1.55, abs=1e-12)
    assert combine_total(1, 1, 1, 1, W) == pytest.approx(1.56, abs=1e-12)
    l_res = combine_restoration(1, 1, 1, 1, W)
    assert combine_total(1, 1, 1, l_res, W) == pytest.approx(1.565, abs=1e-12)
    assert combine_total(0.3, 0.7, 0.2, 5.0, LossWeights(p4=0)) == combine_detection(0.3, 0.7, 0.2, W)


@given(*[st.floats(0, 100) for _ in range(7)])
@settings(max_examples=50, deadline=None)
def test_weighted_sum_identities(box, obj, cls, l1, ms, c, s):
    res = combine_restoration(l1, ms, c, s, W)
    assert res == 0.25 * l1 + 0.25 * ms + 0.5 * (c + s)
    tot = total_loss({"l_box": box, "l_obj": obj, "l_cls": cls}, {"l_res": res}, W)
    assert tot == 0.05 * box + 1.0 * obj + 0.5 * cls + 0.01 * res


def test_restoration_loss_zero_at_identity():
    x = _rand(5)
    parts = restoration_loss(x, x, W, IdentityExtractor())
    assert float(parts["l_res"]) == pytest.approx(0.0, abs=1e-9)


def test_restoration_loss_mask():
    x, y = _rand(6, (2, 3, 32, 32)), _rand(7, (2, 3, 32, 32))
    only_second = restoration_loss(x, y, W, mask=torch.tensor([False, True]))
    direct = restoration_loss(x[1:], y[1:], W)
    assert float(only_second["l_res"]) == pytest.approx(float(direct["l_res"]))
    none = restoration_loss(x, y, W, mask=torch.tensor([False, False]))
    assert float(none["l_res"]) == 0.0


# ---------------------------------------------------------------- detection

def test_ciou_identical_boxes_is_one():
    b = torch.tensor([[0.5, 0.5, 0.2, 0.3]], dtype=torch.float64)
    assert float(bbox_ciou(b, b)) == pytest.approx(1.0, abs=1e-9)


def test_ciou_penalizes_offset_and_aspect():
    t = torch.tensor([0.5, 0.5, 0.2, 0.2], dtype=torch.float64)
    shifted = torch.tensor([0.6, 0.5, 0.2, 0.2], dtype=torch.float64)
    # plain IoU of the shifted box: 0.1*0.2 / (0.04 + 0.04 - 0.02) = 1/3;
    # enclosing box 0.3 x 0.2 -> c^2 = 0.13, center distance^2 = 0.01
    assert float(bbox_ciou(shifted, t)) == pytest.approx(1 / 3 - 0.01 / 0.13, rel=1e-6)


def _perfect_raw(cfg, boxes, H=64, W_=64, sat=30.0):
    raw = [torch.full((1, H // s, W_ // s, cfg.num_anchors, 5 + cfg.num_classes), -sat, dtype=torch.float64)
           for s in cfg.grid_scales]
    for b in boxes:
        (si, row, col, a), t = encode_box(cfg, b, H, W_)
        raw[si][0, row, col, a, :4] = torch.tensor(t, dtype=torch.float64)
        raw[si][0, row, col, a, 4] = sat
        raw[si][0, row, col, a, 5 + b.class_id] = sat
    return raw


def test_detection_loss_vanishes_at_perfect_prediction():
    cfg = DetectorConfig(num_classes=3)
    boxes = [BoundingBox(2, 0.3, 0.4, 0.2, 0.25), BoundingBox(0, 0.7, 0.7, 0.5, 0.6)]
    raw = _perfect_raw(cfg, boxes)
    parts = detection_loss(raw, build_targets(cfg, [boxes], 64, 64, torch.float64), cfg)
    assert float(parts["l_box"]) < 1e-9
    assert float(parts["l_cls"]) < 1e-12
    assert float(parts["l_obj"]) < 1e-12


def test_detection_loss_without_targets():
    cfg = DetectorConfig(num_classes=2)
    raw = [torch.zeros(2, 64 // s, 64 // s, 3, 7, dtype=torch.float64, requires_grad=True) for s in cfg.grid_scales]
    parts = detection_loss(raw, build_targets(cfg, [[], []], 64, 64), cfg)
    assert float(parts["l_box"]) == 0 and float(parts["l_cls"]) == 0
    assert float(parts["l_obj"]) == pytest.approx(2 * math.log(2))
    parts["l_det"].backward()
    # objectness is pushed toward background everywhere
    assert (raw[0].grad[..., 4] > 0).all()


def test_detection_loss_weighted_sum():
    cfg = DetectorConfig(num_classes=2)
    torch.manual_seed(0)
    raw = [torch.randn(1, 64 // s, 64 // s, 3, 7) for s in cfg.grid_scales]
    parts = detection_loss(raw, build_targets(cfg, [[BoundingBox(1, 0.5, 0.5, 0.3, 0.3)]], 64, 64), cfg)
    expected = 0.05 * parts["l_box"] + 1.0 * parts["l_obj"] + 0.5 * parts["l_cls"]
    assert float(parts["l_det"]) == pytest.approx(float(expected), rel=1e-7)


def test_detection_loss_empty_batch_errors():
    cfg = DetectorConfig(num_classes=2)
    raw = [torch.zeros(0, 64 // s, 64 // s, 3, 7) for s in cfg.grid_scales]
    with pytest.raises(ValueError, match="non-empty"):
        detection_loss(raw, build_targets(cfg, [], 64, 64), cfg)


def test_weights_reject_negative():
    with pytest.raises(ValueError):
        LossWeights(p4=-0.1)
