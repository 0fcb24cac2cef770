import numpy as np
import pytest

from skelalign.encoder import (EncoderConfig, build_model, load_checkpoint,
                               pool_features, save_checkpoint)
from skelalign.errors import DataFormatError, PartitionError, ShapeError
from skelalign.gradcheck import gradcheck_suite
from skelalign.graph import build_partition, make_partition
from skelalign.train import rng_stream


@pytest.fixture()
def tiny_model(toy_graph, four_part):
    return build_model(toy_graph, four_part, num_classes=4, head_dim=16,
                       rng=rng_stream(0, "init"), channels=(8, 8), strides=(1, 2))


def test_pool_constant_feature(four_part):
    h = np.full((2, 3, 5, 10), 7.25)
    g, parts = pool_features(h, four_part)
    np.testing.assert_allclose(g, 7.25)
    np.testing.assert_allclose(parts, 7.25)


def test_pool_global_group_equals_global(toy_graph):
    p = build_partition("global", toy_graph)
    h = np.random.default_rng(0).standard_normal((3, 4, 6, 10))
    g, parts = pool_features(h, p)
    np.testing.assert_allclose(parts[0], g, atol=1e-12)


def test_pool_two_groups_hand_computed():
    partition = make_partition("halves", ("a", "b"), ((0,), (1, 2)), 3, True)
    h = np.zeros((1, 1, 2, 3))
    h[..., 0] = 4.0
    h[..., 1:] = 1.0
    g, parts = pool_features(h, partition)
    np.testing.assert_allclose(parts[0], 4.0)
    np.testing.assert_allclose(parts[1], 1.0)
    np.testing.assert_allclose(g, (4.0 + 1.0 + 1.0) / 3)  # area-weighted mean


def test_pool_group_out_of_range():
    partition = make_partition("p", ("a",), ((5,),), 6, True)
    with pytest.raises(PartitionError):
        pool_features(np.zeros((1, 2, 3, 4)), partition)


def test_forward_shapes(tiny_model):
    x = np.random.default_rng(1).standard_normal((1, 3, 8, 10)).astype(np.float32)
    out = tiny_model.forward(x, train=False)
    assert out.logits.shape == (1, 4)
    assert out.global_feature.shape == (1, 8)
    assert out.part_features.shape == (5, 1, 16)  # 4 parts + global slot


def test_forward_rejects_wrong_joint_count(tiny_model):
    with pytest.raises(ShapeError):
        tiny_model.forward(np.zeros((1, 3, 8, 7), dtype=np.float32))


def test_eval_forward_batch_equivariance(tiny_model):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((6, 3, 8, 10)).astype(np.float32)
    perm = rng.permutation(6)
    out = tiny_model.forward(x, train=False)
    out_perm = tiny_model.forward(x[perm], train=False)
    np.testing.assert_allclose(out_perm.logits, out.logits[perm], atol=1e-6)
    np.testing.assert_allclose(out_perm.part_features, out.part_features[:, perm], atol=1e-6)


def test_eval_forward_batch_size_independent(tiny_model):
    x = np.random.default_rng(4).standard_normal((5, 3, 8, 10)).astype(np.float32)
    full = tiny_model.forward(x, train=False).logits
    single = np.concatenate([tiny_model.forward(x[i:i + 1], train=False).logits
                             for i in range(5)])
    np.testing.assert_allclose(full, single, atol=1e-6)


def test_model_gradients_match_finite_differences():
    report = gradcheck_suite(seeds=3, targets=[
        "layer/pooling_and_heads", "model/cross_entropy", "model/gap_objective"])
    assert report.all_pass, report.format_lines()


def test_checkpoint_round_trip_bit_exact(tiny_model, tmp_path):
    x = np.random.default_rng(5).standard_normal((4, 3, 8, 10)).astype(np.float32)
    tiny_model.forward(x, train=True)  # move BN running stats off their init
    first = tmp_path / "a"
    save_checkpoint(tiny_model, first, extra={"modality": "joint"})
    loaded, extra = load_checkpoint(first)
    assert extra == {"modality": "joint"}
    second = tmp_path / "b"
    save_checkpoint(loaded, second, extra=extra)
    assert (first / "weights.f32").read_bytes() == (second / "weights.f32").read_bytes()
    assert (first / "model.json").read_text() == (second / "model.json").read_text()
    out_a = tiny_model.forward(x, train=False)
    out_b = loaded.forward(x, train=False)
    np.testing.assert_array_equal(out_a.logits, out_b.logits)


def test_checkpoint_truncated_weights_rejected(tiny_model, tmp_path):
    save_checkpoint(tiny_model, tmp_path)
    blob = (tmp_path / "weights.f32").read_bytes()
    (tmp_path / "weights.f32").write_bytes(blob[:-8])
    with pytest.raises(DataFormatError):
        load_checkpoint(tmp_path)


def test_checkpoint_trailing_bytes_rejected(tiny_model, tmp_path):
    save_checkpoint(tiny_model, tmp_path)
    with open(tmp_path / "weights.f32", "ab") as f:
        f.write(b"\x00" * 4)
    with pytest.raises(DataFormatError):
        load_checkpoint(tmp_path)


def test_config_validation():
    from skelalign.errors import ConfigError

    with pytest.raises(ConfigError):
        EncoderConfig(num_classes=1, head_dim=8)
    with pytest.raises(ConfigError):
        EncoderConfig(num_classes=3, head_dim=8, channels=(8,), strides=(1, 2))
