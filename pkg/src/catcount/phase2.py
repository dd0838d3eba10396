"""Total crowd map: a CNN regression branch fused with the detection crowd map
through two learned attention masks."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import (
    ModelParams,
    ShapeError,
    Tensor,
    avgpool_down,
    concat_channels,
    conv2d,
    conv_layer,
    maxpool2,
    mul,
    relu,
    sigmoid,
    take_channel,
)

REGRESSION_WIDTHS = (20, 40, 20, 10)
REGRESSION_KERNELS = (7, 5, 5, 5)
MASK_WIDTHS = (16, 16, 16, 8, 2)
MASK_KERNELS = (7, 5, 5, 5, 5)
DOWNSAMPLE = 4


def _conv(params: ModelParams, name: str, x: Tensor) -> Tensor:
    w = params[f"{name}.weight"]
    return conv2d(x, w, params[f"{name}.bias"], padding=w.shape[-1] // 2)


def _spatial(t: Tensor) -> tuple[int, int]:
    return t.shape[-2], t.shape[-1]


class Phase2Model:
    """Parameters are namespaced ``reg.*`` (regression branch), ``mask.*`` (mask net)
    and ``fuse.*`` (2-in/1-out 1x1 fusion)."""

    def __init__(
        self,
        params: ModelParams,
        regression_widths: Sequence[int] = REGRESSION_WIDTHS,
        mask_widths: Sequence[int] = MASK_WIDTHS,
    ):
        self.params = params
        self.regression_widths = tuple(regression_widths)
        self.mask_widths = tuple(mask_widths)

    @classmethod
    def create(
        cls,
        seed: int = 0,
        regression_widths: Sequence[int] = REGRESSION_WIDTHS,
        mask_widths: Sequence[int] = MASK_WIDTHS,
        image_channels: int = 1,
    ) -> Phase2Model:
        if len(regression_widths) != 4:
            raise ValueError(f"regression branch has 4 conv layers, got widths {regression_widths}")
        if len(mask_widths) != 5 or mask_widths[-1] != 2:
            raise ValueError(f"mask net needs 5 layers ending in 2 channels, got {mask_widths}")
        rng = np.random.default_rng(seed)
        p = ModelParams()
        c_in = image_channels
        for i, (width, k) in enumerate(zip(regression_widths, REGRESSION_KERNELS), start=1):
            conv_layer(p, rng, f"reg.conv{i}", c_in, width, k)
            c_in = width
        # nonnegative read-out keeps the final ReLU alive at initialisation
        p.add("reg.out.weight", Tensor(np.abs(rng.standard_normal((1, c_in, 1, 1))) * 0.1 / c_in))
        p.add("reg.out.bias", Tensor(np.zeros(1)))
        c_in = 2 + image_channels
        for i, (width, k) in enumerate(zip(mask_widths, MASK_KERNELS), start=1):
            conv_layer(p, rng, f"mask.conv{i}", c_in, width, k, gain=1.0 if i < 5 else 0.1)
            c_in = width
        p.add("fuse.weight", Tensor(np.ones((1, 2, 1, 1))))
        p.add("fuse.bias", Tensor(np.zeros(1)))
        return cls(p, regression_widths, mask_widths)

    def subset(self, prefix: str) -> ModelParams:
        return ModelParams([(n, t) for n, t in self.params if n.startswith(prefix)])

    @property
    def regression_branch(self) -> ModelParams:
        return self.subset("reg.")

    @property
    def mask_net(self) -> ModelParams:
        return self.subset("mask.")

    @property
    def fusion_1x1(self) -> ModelParams:
        return self.subset("fuse.")

    def forward(self, image: Tensor, detection_map: Tensor) -> tuple[Tensor, Tensor]:
        """Return ``(total crowd map, regression map)`` for one image or a stack."""
        regression = regression_forward(image, self)
        small = avgpool_down(image, DOWNSAMPLE)
        return fuse(regression, detection_map, small, self), regression


def regression_forward(image: Tensor, model: Phase2Model) -> Tensor:
    """conv7-pool-conv5-pool-conv5-conv5-1x1 with ReLUs; output at 1/4 resolution."""
    h, w = _spatial(image)
    if h % DOWNSAMPLE or w % DOWNSAMPLE:
        raise ShapeError(f"regression_forward: image size {h}x{w} must be divisible by {DOWNSAMPLE}")
    p = model.params
    x = relu(_conv(p, "reg.conv1", image))
    x = maxpool2(x)
    x = relu(_conv(p, "reg.conv2", x))
    x = maxpool2(x)
    x = relu(_conv(p, "reg.conv3", x))
    x = relu(_conv(p, "reg.conv4", x))
    return relu(_conv(p, "reg.out", x))


def attention_masks(regression_map: Tensor, small_image: Tensor, detection_map: Tensor, model: Phase2Model) -> Tensor:
    """Two sigmoid gates from the stack (regression, image, detection)."""
    p = model.params
    x = concat_channels([regression_map, small_image, detection_map])
    for i in range(1, 5):
        x = relu(_conv(p, f"mask.conv{i}", x))
    return sigmoid(_conv(p, "mask.conv5", x))


def fuse(regression_map: Tensor, detection_map: Tensor, small_image: Tensor, model: Phase2Model) -> Tensor:
    """Gate the regression and detection maps and mix them with the 1x1 fusion conv.

    ``small_image`` must already be at map resolution (see :func:`avgpool_down`).
    """
    shapes = {"regression": _spatial(regression_map), "detection": _spatial(detection_map), "image": _spatial(small_image)}
    if len(set(shapes.values())) != 1:
        raise ShapeError(f"fuse: input resolutions differ: {shapes}")
    masks = attention_masks(regression_map, small_image, detection_map, model)
    gated = concat_channels(
        [
            mul(take_channel(masks, 0), regression_map),
            mul(take_channel(masks, 1), detection_map),
        ]
    )
    return relu(conv2d(gated, model.params["fuse.weight"], model.params["fuse.bias"]))
