import numpy as np
import pytest

from lgaf.backbone import BackboneConfig, build_backbone, forward_backbone
from lgaf.gfe import GlobalHead, global_embed
from lgaf.gradcheck import grad_check_report
from lgaf.rng import RngStream
from lgaf.tensor import ShapeError, Tensor, tensor_sum
from oracles import matmul_naive


def small_cfg(**kw):
    base = dict(input_size=(16, 16), channel_widths=(4, 8), blocks_per_stage=1)
    base.update(kw)
    return BackboneConfig(**base)


def test_build_is_deterministic():
    a = build_backbone(BackboneConfig(), RngStream(0, name="init"))
    b = build_backbone(BackboneConfig(), RngStream(0, name="init"))
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()


def test_default_output_shape():
    cfg = BackboneConfig()
    assert cfg.feature_shape == (64, 4, 4)
    net = build_backbone(cfg, RngStream(0))
    out = forward_backbone(net, Tensor(np.zeros((2, 3, 32, 32), np.float32)))
    assert out.shape == (2, 64, 4, 4)


@pytest.mark.parametrize("widths,size", [((8,), (8, 8)), ((4, 8, 8), (32, 32)), ((4, 4), (20, 24))])
def test_output_shape_matches_arithmetic(widths, size):
    cfg = BackboneConfig(input_size=size, channel_widths=widths, blocks_per_stage=1)
    h, w = size
    for _ in widths:
        h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
    assert cfg.feature_shape == (widths[-1], h, w)
    out = forward_backbone(build_backbone(cfg, RngStream(1)), Tensor(np.ones((1, 3) + size, np.float32)))
    assert out.shape[1:] == cfg.feature_shape


def test_invalid_configs():
    with pytest.raises(ValueError):
        build_backbone(BackboneConfig(blocks_per_stage=0), RngStream(0))
    with pytest.raises(ValueError):
        build_backbone(BackboneConfig(input_size=(16, 16)), RngStream(0))  # 16 -> 2x2 final map


def test_wrong_input_size():
    net = build_backbone(small_cfg(), RngStream(0))
    with pytest.raises(ShapeError):
        forward_backbone(net, Tensor(np.zeros((1, 3, 32, 32))))


def test_zero_image_zero_output():
    net = build_backbone(small_cfg(), RngStream(0))
    out = forward_backbone(net, Tensor(np.zeros((2, 3, 16, 16), np.float32)))
    assert np.all(out.data == 0)


def test_identical_images_identical_rows_and_permutation():
    net = build_backbone(small_cfg(batch_norm=True), RngStream(2)).eval()
    x = np.random.default_rng(0).random((3, 3, 16, 16)).astype(np.float32)
    x[2] = x[0]
    out = forward_backbone(net, Tensor(x)).data
    assert np.array_equal(out[0], out[2])
    perm = [2, 0, 1]
    np.testing.assert_array_equal(forward_backbone(net, Tensor(x[perm])).data, out[perm])


def test_backbone_gradcheck_wrt_input():
    net = build_backbone(small_cfg(), RngStream(3), dtype=np.float64)
    x = np.random.default_rng(1).random((2, 3, 16, 16))
    rep = grad_check_report(lambda t: tensor_sum(forward_backbone(net, t)), [x], max_coords=60, skip_kinks=True)
    assert rep.max_rel_error <= 1e-4


# ---------------------------------------------------------------- gfe


def test_gfe_zero_map_zero_embedding():
    head = GlobalHead((4, 2, 2), 8, RngStream(0))
    assert np.all(global_embed(head, Tensor(np.zeros((3, 4, 2, 2), np.float32))).data == 0)


def test_gfe_identity_weights():
    head = GlobalHead((2, 2, 2), 8, RngStream(0), dtype=np.float64)
    head.weight.data = np.eye(8)
    x = np.random.default_rng(2).normal(size=(3, 2, 2, 2))
    np.testing.assert_array_equal(global_embed(head, Tensor(x)).data, x.reshape(3, -1))


def test_gfe_matches_matmul_oracle_and_is_linear():
    head = GlobalHead((4, 2, 2), 5, RngStream(1), dtype=np.float64)
    head.bias.data = np.random.default_rng(3).normal(size=5)
    x = np.random.default_rng(4).normal(size=(3, 4, 2, 2))
    out = global_embed(head, Tensor(x)).data
    np.testing.assert_allclose(out, matmul_naive(x.reshape(3, -1), head.weight.data, head.bias.data), atol=1e-9)
    head.bias.data[:] = 0
    np.testing.assert_allclose(global_embed(head, Tensor(2.5 * x)).data, 2.5 * global_embed(head, Tensor(x)).data,
                               rtol=1e-12)
    assert np.all(np.linalg.norm(global_embed(head, Tensor(x)).data, axis=1) > 0)


def test_gfe_shape_mismatch():
    head = GlobalHead((4, 2, 2), 5, RngStream(1))
    with pytest.raises(ShapeError):
        global_embed(head, Tensor(np.zeros((1, 4, 3, 3))))


def test_gfe_batch_norm_option():
    head = GlobalHead((4, 2, 2), 5, RngStream(1), batch_norm=True, dtype=np.float64)
    out = global_embed(head, Tensor(np.random.default_rng(5).normal(size=(16, 4, 2, 2)))).data
    np.testing.assert_allclose(out.mean(0), 0, atol=1e-7)
