import numpy as np
import pytest

from dhcnet import hce, losses, nn
from dhcnet.backbone import BackboneConfig, StagedBackbone
from dhcnet.tensor import Tensor, backward

from oracles import roi_align_reference


def test_quarter_views_tile_64px(rng):
    img = rng.uniform(size=(3, 64, 64))
    vs = hce.extract_views(img, 0.25)
    assert [(b.x0, b.y0, b.x1, b.y1) for b in vs.boxes] == [
        (0, 0, 32, 32), (32, 0, 64, 32), (0, 32, 32, 64), (32, 32, 64, 64)]
    crops = [hce.crop(img, b) for b in vs.boxes]
    assert all(c.shape == (3, 32, 32) for c in crops)
    rebuilt = np.concatenate([np.concatenate(crops[:2], axis=2), np.concatenate(crops[2:], axis=2)], axis=1)
    assert rebuilt.tobytes() == img.tobytes()
    assert vs.views.shape == (4, 3, 64, 64)


def test_full_views_equal_image(rng):
    img = rng.uniform(size=(3, 32, 32))
    vs = hce.extract_views(img, 1.0)
    for v in vs.views:
        np.testing.assert_array_equal(v, img)


@pytest.mark.parametrize("sigma_v", [0.25, 0.4, 0.7, 1.0])
def test_views_cover_image(sigma_v):
    cover = np.zeros((64, 64), bool)
    for b in hce.view_boxes(64, 64, sigma_v):
        cover[int(b.y0):int(b.y1), int(b.x0):int(b.x1)] = True
    assert cover.all()


def test_small_views_rejected():
    with pytest.raises(ValueError, match="cover"):
        hce.extract_views(np.zeros((3, 64, 64)), 0.2)
    assert hce.view_proportion(0.1) == 0.25
    assert hce.view_proportion(0.5) == 0.5


def model16():
    return StagedBackbone(BackboneConfig(num_classes=3, input_size=16, stage_channels=[2, 2, 3, 3],
                                         blocks_per_stage=1, seed=1))


def test_local_features_shape_and_modes(rng):
    model = model16()
    vs = hce.extract_views(rng.uniform(size=(3, 16, 16)), 0.25)
    online = hce.local_features(model, vs, "online")
    frozen = hce.local_features(model, vs, "frozen")
    assert online.shape[0] == 4
    np.testing.assert_array_equal(online.data, frozen.data)
    assert online.requires_grad and not frozen.requires_grad


def test_frozen_features_send_no_gradient(rng):
    model = model16()
    vs = hce.extract_views(rng.uniform(size=(3, 16, 16)), 0.25)
    target = Tensor(rng.normal(size=(4, 3, 1, 1)), requires_grad=True)
    loss = losses.exp_loss(target, hce.local_features(model, vs, "frozen"))
    backward(loss)
    assert all(p.grad is None for p in model.parameters())


def test_local_features_size_mismatch():
    with pytest.raises(ValueError, match="expects"):
        hce.local_features(model16(), np.zeros((4, 3, 32, 32)))


def test_feature_box_arithmetic():
    vs = hce.extract_views(np.zeros((3, 64, 64)), 0.25)
    boxes = hce.feature_boxes(vs, (64, 64), (4, 4))
    assert [(b.x0, b.y0, b.x1, b.y1) for b in boxes] == [
        (0, 0, 2, 2), (2, 0, 4, 2), (0, 2, 2, 4), (2, 2, 4, 4)]


def test_global_features_constant_map():
    vs = hce.extract_views(np.zeros((3, 64, 64)), 0.4)
    out = hce.global_features(Tensor(np.full((5, 4, 4), 1.75)), vs, 4, 4)
    assert out.shape == (4, 5, 4, 4)
    np.testing.assert_allclose(out.data, 1.75, atol=1e-14)


def test_global_features_match_reference(rng):
    feat = rng.normal(size=(3, 4, 4))
    for sigma_v in (0.25, 0.5, 0.81):
        vs = hce.extract_views(np.zeros((3, 64, 64)), sigma_v)
        out = hce.global_features(Tensor(feat), vs, 4, 4, samples_per_bin=2).data
        for i, b in enumerate(vs.boxes):
            ref = roi_align_reference(feat, (b.x0 / 16, b.y0 / 16, b.x1 / 16, b.y1 / 16), 4, 4, 2)
            np.testing.assert_allclose(out[i], ref, atol=1e-6)


def test_quadrants_reassemble_feature_map(rng):
    feat = rng.normal(size=(3, 4, 4))
    vs = hce.extract_views(np.zeros((3, 64, 64)), 0.25)
    q = hce.global_features(Tensor(feat), vs, 2, 2, samples_per_bin=1).data
    rebuilt = np.concatenate([np.concatenate([q[0], q[1]], axis=2), np.concatenate([q[2], q[3]], axis=2)], axis=1)
    np.testing.assert_array_equal(rebuilt, feat)


def test_box_outside_feature_plane():
    boxes = [nn.Box(0, 0, 80, 32)]
    with pytest.raises(ValueError, match="outside"):
        hce.feature_boxes(boxes, (64, 64), (4, 4))


def test_exp_loss_pairing_order_invariance(rng):
    fg, fl = rng.normal(size=(4, 3, 2, 2)), rng.normal(size=(4, 3, 2, 2))
    perm = [2, 0, 3, 1]
    a = losses.exp_loss(Tensor(fg), Tensor(fl)).item()
    b = losses.exp_loss(Tensor(fg[perm]), Tensor(fl[perm])).item()
    assert a == pytest.approx(b, rel=1e-14)
