import numpy as np
import pytest

from pcrpose import tensor as T
from pcrpose.cam import cam_forward
from pcrpose.gradcheck import TOLERANCE, model_check
from pcrpose.model import (
    PcrConfig,
    PcrModel,
    decoder_forward,
    load_checkpoint,
    multi_task_loss,
    pcr_forward,
    predict,
    save_checkpoint,
    train_step,
)
from pcrpose.tensor import ShapeError, Tensor


def small_config(**kw):
    base = dict(K=2, L=2, channels=(8, 8), joints=3, input_h=32, input_w=24, init_std=0.1)
    base.update(kw)
    return PcrConfig(**base)


@pytest.fixture
def images():
    return np.random.default_rng(5).normal(size=(2, 3, 32, 24))


def zero_last_cam(model, level):
    cam = model.decoders[level - 1].cams[-1]
    for bn in (cam.hdc_bn, cam.res_bn):
        bn.gamma.data[:] = 0.0
        bn.beta.data[:] = 0.0


# ---------------------------------------------------------------------------
# configuration


def test_default_geometry():
    cfg = PcrConfig()
    assert cfg.cam_strides == (1, 1, 2)
    assert cfg.encoder_stride == 8
    assert cfg.heatmap_size == (16, 12)


@pytest.mark.parametrize("kw, message", [
    (dict(K=0, channels=()), "K and L"),
    (dict(channels=(8,)), "channel plan"),
    (dict(channels=(8, 6)), "multiple of 4"),
    (dict(cam_strides=(1, 3)), "cam_strides"),
    (dict(input_h=30), "divisible"),
    (dict(K=1, channels=(8,), aux=True), "penultimate"),
    (dict(enc_channels=(8,)), "enc_channels"),
])
def test_config_rejects(kw, message):
    with pytest.raises(ValueError, match=message):
        small_config(**kw)


def test_config_dict_round_trip():
    cfg = small_config(aux=True)
    assert PcrConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="unknown"):
        PcrConfig.from_dict({**cfg.to_dict(), "depth": 3})


# ---------------------------------------------------------------------------
# forward structure


def test_output_shapes(images):
    cfg = small_config(aux=True)
    out = pcr_forward(PcrModel(cfg), images)
    assert len(out.heatmaps) == cfg.L
    for h in out.heatmaps + [out.aux]:
        assert h.shape == (2, 3, 8, 6)


def test_stride_one_decoder_keeps_resolution(images):
    cfg = small_config(cam_strides=(1, 1), enc_channels=(8, 8))
    out = pcr_forward(PcrModel(cfg), images)
    assert out.final.shape == (2, 3, 8, 6)


def test_decoder_is_composition_of_cams(images):
    model = PcrModel(small_config(K=3, channels=(8, 8, 8)))
    feats = model.encoder(Tensor(images), "infer")
    outs = decoder_forward(model, feats, 1, "infer")
    c1, c2, c3 = model.decoders[0].cams
    expected = cam_forward(c3, cam_forward(c2, cam_forward(c1, feats, "infer"), "infer"), "infer")
    np.testing.assert_array_equal(outs[-1].data, expected.data)
    assert len(outs) == 3


def test_single_level_head_reads_its_decoder(images):
    model = PcrModel(small_config(L=1))
    out = pcr_forward(model, images, "infer")
    f = out.cam_outputs[0][-1]
    np.testing.assert_array_equal(out.final.data, model.heads[0](f).data)


def test_level_two_with_silenced_decoder_reads_level_one(images):
    model = PcrModel(small_config())
    zero_last_cam(model, 2)
    out = pcr_forward(model, images, "infer")
    assert not out.cam_outputs[1][-1].data.any()
    f1 = out.cam_outputs[0][-1]
    np.testing.assert_array_equal(out.heatmaps[1].data, model.heads[1](f1).data)


def test_levels_read_running_sums(images):
    model = PcrModel(small_config(L=3))
    out = pcr_forward(model, images, "infer")
    f = [outs[-1].data for outs in out.cam_outputs]
    np.testing.assert_array_equal(out.fused[2].data, (f[0] + f[1]) + f[2])
    phi = model.heads[2]
    expected = T.conv2d(Tensor(f[0] + f[1] + f[2]), phi.weight, phi.bias, phi.spec)
    np.testing.assert_array_equal(out.heatmaps[2].data, expected.data)


def test_forward_rejects_wrong_image_shape():
    model = PcrModel(small_config())
    with pytest.raises(ShapeError):
        pcr_forward(model, np.zeros((1, 3, 32, 20)))
    with pytest.raises(ValueError, match="level"):
        decoder_forward(model, Tensor(np.zeros((1, 8, 4, 3))), 3)


def test_same_seed_same_model():
    a, b = PcrModel(small_config(), seed=3), PcrModel(small_config(), seed=3)
    for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data)


# ---------------------------------------------------------------------------
# loss


def test_loss_is_zero_on_exact_prediction(images):
    model = PcrModel(small_config())
    out = pcr_forward(model, images, "infer")
    for h in out.heatmaps[:-1]:
        h.data = out.final.data.copy()
    loss, terms = multi_task_loss(out, out.final.data.copy(), np.ones((2, 3)))
    assert loss.item() == 0.0 and terms == [0.0, 0.0]


def test_loss_hand_case():
    pred = Tensor(np.array([0.5, 0.25, 0.0, 0.0]).reshape(1, 1, 1, 4))
    target = np.array([0.0, 0.0, 0.0, 1.0]).reshape(1, 1, 1, 4)
    out = type("Out", (), {"heatmaps": [pred], "aux": None})()
    loss, _ = multi_task_loss(out, target, np.ones((1, 1)))
    # mean of (0.25 + 0.0625 + 0 + 1)
    assert loss.item() == pytest.approx(1.3125 / 4, abs=1e-15)


def test_loss_weights_levels_and_aux(images):
    model = PcrModel(small_config(aux=True))
    out = pcr_forward(model, images, "infer")
    target = np.random.default_rng(1).uniform(size=out.final.shape)
    w = np.ones((2, 3))
    loss, terms = multi_task_loss(out, target, w, level_weights=[0.5, 2.0], aux_weight=3.0)
    assert len(terms) == 3
    assert loss.item() == pytest.approx(0.5 * terms[0] + 2.0 * terms[1] + 3.0 * terms[2], rel=1e-14)
    with pytest.raises(ValueError):
        multi_task_loss(out, target, w, level_weights=[1.0])


def test_zero_weight_joint_does_not_contribute(images):
    model = PcrModel(small_config(L=1))
    out = pcr_forward(model, images, "infer")
    target = np.zeros(out.final.shape)
    w = np.array([[1.0, 0.0, 1.0], [1.0, 1.0, 1.0]])
    base, _ = multi_task_loss(out, target, w)
    target[0, 1] = 100.0
    moved, _ = multi_task_loss(out, target, w)
    assert base.item() == moved.item()


# ---------------------------------------------------------------------------
# training


def test_zero_learning_rate_leaves_parameters_untouched(images):
    model = PcrModel(small_config())
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    target = np.random.default_rng(2).uniform(size=(2, 3, 8, 6))
    res = [train_step(model, images, target, np.ones((2, 3)), 0.0).loss for _ in range(3)]
    assert res[0] == res[1] == res[2]
    for n, p in model.named_parameters():
        np.testing.assert_array_equal(p.data, before[n])


def test_small_steps_do_not_increase_loss(images):
    model = PcrModel(small_config())
    target = np.random.default_rng(2).uniform(size=(2, 3, 8, 6))
    losses = [train_step(model, images, target, np.ones((2, 3)), 0.05).loss for _ in range(10)]
    assert all(b <= a for a, b in zip(losses, losses[1:]))


def test_negative_learning_rate_rejected(images):
    with pytest.raises(ValueError):
        train_step(PcrModel(small_config()), images, np.zeros((2, 3, 8, 6)), np.ones((2, 3)), -1.0)


def test_non_finite_loss_raises(images):
    model = PcrModel(small_config())
    target = np.full((2, 3, 8, 6), np.inf)
    with pytest.raises(T.NumericalError):
        train_step(model, images, target, np.ones((2, 3)), 0.1)


def test_micro_model_finite_differences():
    res = model_check(seed=2, input_hw=(16, 12), limit=8)
    assert res.ok, res
    assert res.rel_error < TOLERANCE


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(images, tmp_path):
    model = PcrModel(small_config(aux=True), seed=4)
    target = np.random.default_rng(2).uniform(size=(2, 3, 8, 6))
    for _ in range(2):
        train_step(model, images, target, np.ones((2, 3)), 0.1)
    save_checkpoint(model, tmp_path, seed=4)
    loaded = load_checkpoint(tmp_path)
    assert loaded.cfg == model.cfg
    np.testing.assert_array_equal(predict(loaded, images), predict(model, images))


def test_checkpoint_shape_mismatch(images, tmp_path):
    save_checkpoint(PcrModel(small_config()), tmp_path)
    manifest = tmp_path / "manifest.json"
    text = manifest.read_text().replace('"joints": 3', '"joints": 4')
    manifest.write_text(text)
    with pytest.raises(ShapeError):
        load_checkpoint(tmp_path)
