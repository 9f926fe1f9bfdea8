import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import manual_cam

from pcrpose import tensor as T
from pcrpose.cam import (
    DILATIONS,
    Cam,
    CamConfig,
    cam_forward,
    hdc_concat,
    hdc_forward,
    res_forward,
    se_forward,
)
from pcrpose.tensor import ShapeError, Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(99)


def make_cam(rng, c_in=4, c=8, stride=2, std=0.5, **kw):
    return Cam(CamConfig(1, c_in, c, stride, init_std=std, **kw), rng)


def test_config_validation():
    with pytest.raises(ValueError, match="multiple of 4"):
        CamConfig(1, 4, 6)
    with pytest.raises(ValueError, match="stride"):
        CamConfig(1, 4, 8, stride=3)


def test_parameter_inventory(rng):
    cam = make_cam(rng)
    names = {n for n, _ in cam.named_parameters()}
    assert {"se_reduce.weight", "se_expand.weight", "hdc_fuse.weight", "res_conv.weight"} <= names
    assert sum(1 for n in names if n.startswith("hdc_convs.")) == 2 * len(DILATIONS)
    assert cam.hdc_fuse.weight.shape == (8, 8, 4, 4)


def test_cam_with_no_se_bn_has_no_se_state(rng):
    cam = make_cam(rng, se_bn=False)
    assert cam.se_bn is None
    out = cam_forward(cam, Tensor(rng.normal(size=(2, 4, 3, 3))))
    assert out.shape == (2, 8, 6, 6)


# ---------------------------------------------------------------------------
# SE


def test_se_gate_is_in_open_unit_interval(rng):
    cam = make_cam(rng, std=2.0)
    gate = se_forward(cam, Tensor(rng.normal(size=(3, 8, 5, 5)) * 4))
    assert gate.shape == (3, 8, 1, 1)
    assert np.all((gate.data > 0) & (gate.data < 1))


def test_se_gate_with_zero_weights_is_one_half(rng):
    cam = make_cam(rng)
    cam.se_expand.weight.data[:] = 0
    gate = se_forward(cam, Tensor(rng.normal(size=(2, 8, 4, 4))))
    np.testing.assert_array_equal(gate.data, 0.5)


def test_se_rejects_wrong_channel_count(rng):
    cam = make_cam(rng)
    with pytest.raises(ShapeError):
        se_forward(cam, Tensor(rng.normal(size=(1, 4, 4, 4))))


# ---------------------------------------------------------------------------
# HDC and residual


@pytest.mark.parametrize("stride", [1, 2])
def test_hdc_shapes(rng, stride):
    cam = make_cam(rng, stride=stride)
    x = Tensor(rng.normal(size=(2, 4, 5, 3)))
    assert hdc_concat(cam, x).shape == (2, 8, 5, 3)
    assert hdc_forward(cam, x).shape == (2, 8, 5 * stride, 3 * stride)


def test_dilation_four_branch_has_receptive_span_nine(rng):
    cam = make_cam(rng, c_in=1, c=4, stride=1)
    conv = cam.hdc_convs[3]
    conv.weight.data[:] = 1.0
    conv.bias.data[:] = 0.0
    x = np.zeros((1, 1, 21, 21))
    x[0, 0, 10, 10] = 1.0
    y = conv(Tensor(x)).data[0, 0]
    rows, cols = np.nonzero(y)
    assert rows.max() - rows.min() + 1 == 9
    assert cols.max() - cols.min() + 1 == 9
    assert len(rows) == 9


def test_residual_stride_one_does_not_upsample(rng):
    cam = make_cam(rng, stride=1)
    assert res_forward(cam, Tensor(rng.normal(size=(2, 4, 5, 3)))).shape == (2, 8, 5, 3)


def test_identity_residual_passes_input_in_infer_mode(rng):
    cam = make_cam(rng, c_in=8, c=8, stride=1)
    cam.res_conv.weight.data[:] = np.eye(8)[:, :, None, None]
    cam.res_conv.bias.data[:] = 0.0
    x = rng.normal(size=(2, 8, 4, 4))
    out = res_forward(cam, Tensor(x), "infer")
    np.testing.assert_allclose(out.data, x / np.sqrt(1 + 1e-5), rtol=1e-15)


# ---------------------------------------------------------------------------
# full module


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("mode", ["train", "infer"])
def test_cam_equals_manual_composition(rng, stride, mode):
    cam = make_cam(rng, stride=stride)
    twin = make_cam(np.random.default_rng(0), stride=stride)
    for (_, a), (_, b) in zip(cam.named_parameters(), twin.named_parameters()):
        b.data = a.data.copy()
    x = Tensor(rng.normal(size=(2, 4, 4, 3)))
    np.testing.assert_array_equal(cam_forward(cam, x, mode).data, manual_cam(twin, x, mode).data)


def test_unit_se_scale_gives_relu_of_hdc_plus_residual(rng):
    cam = make_cam(rng)
    x = Tensor(rng.normal(size=(2, 4, 3, 3)))
    ones = Tensor(np.ones((2, 8, 1, 1)))
    out = cam_forward(cam, x, "infer", se_scale=ones)
    expected = np.maximum(hdc_forward(cam, x, "infer").data + res_forward(cam, x, "infer").data, 0)
    np.testing.assert_array_equal(out.data, expected)


def test_zero_residual_gives_relu_of_gated_hdc(rng):
    cam = make_cam(rng)
    cam.res_bn.gamma.data[:] = 0.0
    x = Tensor(rng.normal(size=(2, 4, 3, 3)))
    out = cam_forward(cam, x, "infer")
    gate = se_forward(cam, hdc_concat(cam, x, "infer"), "infer").data
    expected = np.maximum(hdc_forward(cam, x, "infer").data * gate, 0)
    np.testing.assert_array_equal(out.data, expected)


@settings(max_examples=20, deadline=None)
@given(stride=st.sampled_from([1, 2]), quarter=st.integers(1, 3), c_in=st.integers(1, 5),
       h=st.integers(1, 5), w=st.integers(1, 5), seed=st.integers(0, 2 ** 16))
def test_cam_shape_law_and_nonnegativity(stride, quarter, c_in, h, w, seed):
    rng = np.random.default_rng(seed)
    cam = make_cam(rng, c_in=c_in, c=4 * quarter, stride=stride)
    out = cam_forward(cam, Tensor(rng.normal(size=(2, c_in, h, w))))
    assert out.shape == (2, 4 * quarter, stride * h, stride * w)
    assert np.all(out.data >= 0)


def test_every_branch_receives_gradient(rng):
    cam = make_cam(rng)
    x = Tensor(rng.normal(size=(2, 4, 3, 3)), requires_grad=True)
    out = cam_forward(cam, x)
    T.weighted_mse(out, rng.normal(size=out.shape), np.ones((2, 8))).backward()
    for name, p in cam.named_parameters():
        if name.endswith("bias") and not name.startswith("se_expand"):
            continue  # a bias feeding batch norm has zero true gradient
        assert p.grad is not None and np.abs(p.grad).sum() > 0, name
    assert np.abs(x.grad).sum() > 0


def test_cam_rejects_wrong_input_channels(rng):
    cam = make_cam(rng)
    with pytest.raises(ShapeError):
        cam_forward(cam, Tensor(rng.normal(size=(1, 3, 4, 4))))
