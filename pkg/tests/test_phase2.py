import numpy as np
import pytest

from catcount.phase2 import Phase2Model, attention_masks, fuse, regression_forward
from catcount.tensor import ShapeError, Tensor, avgpool_down, backward, precision, sum_all
from catcount.tensor.gradcheck import check_directional, check_elementwise
from catcount.training import phase2_loss
from catcount.config import LossConfig


def inputs(rng, size=16, batch=None):
    shape = (1, size, size) if batch is None else (batch, 1, size, size)
    image = Tensor(rng.uniform(0, 1, shape))
    det_shape = shape[:-2] + (size // 4, size // 4)
    det = Tensor(rng.uniform(0, 0.2, det_shape))
    return image, det


def saturate_masks(model, reg_gate, det_gate):
    """Drive the mask-net output to constant gates via huge final biases."""
    model.params["mask.conv5.weight"].data[:] = 0
    model.params["mask.conv5.bias"].data[:] = [1e4 if reg_gate else -1e4, 1e4 if det_gate else -1e4]


def test_shapes_and_parameter_groups(rng):
    model = Phase2Model.create(0)
    image, det = inputs(rng, 64)
    final, reg = model.forward(image, det)
    assert reg.shape == (1, 16, 16) and final.shape == (1, 16, 16)
    names = set(model.params.names())
    assert names == set(model.regression_branch.names()) | set(model.mask_net.names()) | set(model.fusion_1x1.names())
    assert model.params["reg.conv1.weight"].shape == (20, 1, 7, 7)
    assert model.params["mask.conv1.weight"].shape == (16, 3, 7, 7)
    assert model.params["mask.conv5.weight"].shape == (2, 8, 5, 5)
    assert model.params["fuse.weight"].shape == (1, 2, 1, 1)


def test_batched_forward(rng):
    model = Phase2Model.create(1)
    image, det = inputs(rng, 16, batch=3)
    final, _ = model.forward(image, det)
    single, _ = model.forward(Tensor(image.data[1]), Tensor(det.data[1]))
    np.testing.assert_allclose(final.data[1], single.data, rtol=1e-5, atol=1e-7)


def test_zero_readout_gives_zero_regression(rng):
    model = Phase2Model.create(0)
    model.params["reg.out.weight"].data[:] = 0
    image, _ = inputs(rng, 32)
    assert np.all(regression_forward(image, model).data == 0)


def test_rejects_bad_sizes(rng):
    model = Phase2Model.create(0)
    with pytest.raises(ShapeError):
        regression_forward(Tensor(np.zeros((1, 18, 16))), model)
    image, det = inputs(rng, 16)
    with pytest.raises(ShapeError):
        model.forward(image, Tensor(np.zeros((1, 5, 4))))


def test_closed_masks_leave_only_bias(rng):
    model = Phase2Model.create(2)
    saturate_masks(model, False, False)
    model.params["fuse.bias"].data[:] = 0.3
    image, det = inputs(rng, 16)
    final, _ = model.forward(image, det)
    np.testing.assert_allclose(final.data, 0.3, rtol=1e-6)


def test_pass_through_regression(rng):
    model = Phase2Model.create(2)
    saturate_masks(model, True, True)
    model.params["fuse.weight"].data[:] = np.array([1.0, 0.0]).reshape(1, 2, 1, 1)
    image, _ = inputs(rng, 16)
    final, reg = model.forward(image, Tensor(np.zeros((1, 4, 4))))
    np.testing.assert_allclose(final.data, reg.data, rtol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_saturated_masks_make_count_affine(seed):
    rng = np.random.default_rng(seed)
    model = Phase2Model.create(seed)
    saturate_masks(model, True, False)
    w0, bias = rng.uniform(0.2, 2.0), rng.uniform(0, 0.1)
    model.params["fuse.weight"].data[:] = np.array([w0, rng.normal()]).reshape(1, 2, 1, 1)
    model.params["fuse.bias"].data[:] = bias
    image, det = inputs(rng, 16)
    final, reg = model.forward(image, det)
    expected = w0 * reg.data.astype(np.float64).sum() + bias * final.data.size
    assert final.data.astype(np.float64).sum() == pytest.approx(expected, rel=1e-5)


def test_output_nonnegative(rng):
    for seed in range(4):
        model = Phase2Model.create(seed)
        model.params["fuse.weight"].data[:] = -1.0
        image, det = inputs(rng, 16)
        final, reg = model.forward(image, det)
        assert final.data.min() >= 0 and reg.data.min() >= 0


def test_channel_order_matters(rng):
    model = Phase2Model.create(4)
    image, det = inputs(rng, 16)
    reg = regression_forward(image, model)
    small = avgpool_down(image, 4)
    masks = attention_masks(reg, small, det, model).data
    swapped = attention_masks(det, small, reg, model).data
    assert not np.allclose(masks, swapped)
    fused = fuse(reg, det, small, model).data
    assert not np.allclose(fused, fuse(det, reg, small, model).data)


def test_loss_gradient_matches_fd():
    with precision("double"):
        rng = np.random.default_rng(7)
        model = Phase2Model.create(7)
        image, det = inputs(rng, 16)
        gt = Tensor(rng.uniform(0, 0.2, (1, 4, 4)))
        cfg = LossConfig(sigma_crowd=1.0, sigma_regression_aux=0.5)

        def loss():
            final, reg = model.forward(image, det)
            return phase2_loss(final, reg, gt, cfg)

        err, deriv = check_directional(loss, model.params.tensors(), rng)
        assert err < 1e-4 and deriv != 0
        for name in ("reg.conv1.weight", "mask.conv3.weight", "fuse.weight"):
            assert check_elementwise(loss, [model.params[name]], max_entries=6, rng=rng) < 1e-4
        assert check_elementwise(loss, [image], max_entries=6, rng=rng) < 1e-4


def test_single_backward_reaches_every_parameter(rng):
    model = Phase2Model.create(5)
    image, det = inputs(rng, 16)
    final, reg = model.forward(image, det)
    backward(sum_all(phase2_loss(final, reg, Tensor(np.zeros((1, 4, 4))), LossConfig())))
    missing = [n for n, t in model.params if t.grad is None]
    assert missing == []
