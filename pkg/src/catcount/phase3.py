"""Cross-branch refinement: per-category attention branches whose primary maps are
cross-connected through the total crowd map before a final 7x7 convolution."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .density import count
from .tensor import (
    ModelParams,
    ShapeError,
    Tensor,
    concat_channels,
    conv2d,
    conv_layer,
    mul,
    relu,
    sigmoid,
    sub,
    take_channel,
)

BRANCH_WIDTHS = (20, 20, 20, 10, 2)
BRANCH_KERNELS = (5, 3, 3, 3, 1)
FINAL_KERNEL = 7
BRANCHES = ("sit", "stand")


def _conv(params: ModelParams, name: str, x: Tensor) -> Tensor:
    w = params[f"{name}.weight"]
    return conv2d(x, w, params[f"{name}.bias"], padding=w.shape[-1] // 2)


def _check_aligned(op: str, **maps: Tensor) -> None:
    shapes = {k: (v.shape[:-3], v.shape[-2:]) for k, v in maps.items()}
    if len(set(shapes.values())) != 1:
        raise ShapeError(f"{op}: inputs are not aligned: { {k: v.shape for k, v in maps.items()} }")


class Phase3Model:
    """Parameters per branch ``b`` in (sit, stand): ``b.conv1..5`` (attention),
    ``b.primary`` (2-in 1x1) and ``b.final`` (2-in 7x7)."""

    def __init__(self, params: ModelParams, branch_widths: Sequence[int] = BRANCH_WIDTHS):
        self.params = params
        self.branch_widths = tuple(branch_widths)

    @classmethod
    def create(cls, seed: int = 0, branch_widths: Sequence[int] = BRANCH_WIDTHS, image_channels: int = 1) -> Phase3Model:
        if len(branch_widths) != 5 or branch_widths[-1] != 2:
            raise ValueError(f"branches need 5 layers ending in 2 channels, got {branch_widths}")
        rng = np.random.default_rng(seed)
        p = ModelParams()
        for b in BRANCHES:
            c_in = 2 + image_channels
            for i, (width, k) in enumerate(zip(branch_widths, BRANCH_KERNELS), start=1):
                conv_layer(p, rng, f"{b}.conv{i}", c_in, width, k, gain=1.0 if i < 5 else 0.1)
                c_in = width
            p.add(f"{b}.primary.weight", Tensor(np.ones((1, 2, 1, 1))))
            p.add(f"{b}.primary.bias", Tensor(np.zeros(1)))
            # start the 7x7 as the average of its two inputs at the centre tap
            final = np.zeros((1, 2, FINAL_KERNEL, FINAL_KERNEL))
            final[0, :, FINAL_KERNEL // 2, FINAL_KERNEL // 2] = 0.5
            p.add(f"{b}.final.weight", Tensor(final))
            p.add(f"{b}.final.bias", Tensor(np.zeros(1)))
        return cls(p, branch_widths)

    def branch(self, name: str, include_final: bool = True) -> ModelParams:
        """Parameters of one branch (optionally without its post-crossing 7x7)."""
        keep = [(n, t) for n, t in self.params if n.startswith(f"{name}.")]
        if not include_final:
            keep = [(n, t) for n, t in keep if not n.startswith(f"{name}.final.")]
        return ModelParams(keep)

    def primary(self, name: str, category_map: Tensor, crowd_map: Tensor, small_image: Tensor) -> Tensor:
        return branch_primary(category_map, crowd_map, small_image, self, name)

    def forward(self, sit_map: Tensor, stand_map: Tensor, crowd_map: Tensor, small_image: Tensor) -> tuple[Tensor, Tensor]:
        """Final (sitting, standing) maps."""
        p_sit = branch_primary(sit_map, crowd_map, small_image, self, "sit")
        p_stand = branch_primary(stand_map, crowd_map, small_image, self, "stand")
        return cross_refine(p_sit, p_stand, crowd_map, self)


def segregation_attention(category_map: Tensor, crowd_map: Tensor, small_image: Tensor, model: Phase3Model, name: str) -> Tensor:
    p = model.params
    x = concat_channels([category_map, crowd_map, small_image])
    for i in range(1, 5):
        x = relu(_conv(p, f"{name}.conv{i}", x))
    return sigmoid(_conv(p, f"{name}.conv5", x))


def branch_primary(
    category_map: Tensor,
    crowd_map: Tensor,
    small_image: Tensor,
    model: Phase3Model,
    name: str,
) -> Tensor:
    """``relu(1x1([A0 * category_map, A1 * crowd_map]))`` with A the branch's 2-channel attention."""
    _check_aligned("branch_primary", category=category_map, crowd=crowd_map, image=small_image)
    att = segregation_attention(category_map, crowd_map, small_image, model, name)
    gated = concat_channels([mul(take_channel(att, 0), category_map), mul(take_channel(att, 1), crowd_map)])
    return relu(_conv(model.params, f"{name}.primary", gated))


def cross_refine(primary_sit: Tensor, primary_stand: Tensor, crowd_map: Tensor, model: Phase3Model) -> tuple[Tensor, Tensor]:
    """Each final map sees ``crowd - other branch's primary`` next to its own primary.

    The subtraction is left unclamped.
    """
    _check_aligned("cross_refine", sit=primary_sit, stand=primary_stand, crowd=crowd_map)
    p = model.params
    subtracted_stand = sub(crowd_map, primary_sit)
    subtracted_sit = sub(crowd_map, primary_stand)
    final_stand = relu(_conv(p, "stand.final", concat_channels([subtracted_stand, primary_stand])))
    final_sit = relu(_conv(p, "sit.final", concat_channels([subtracted_sit, primary_sit])))
    return final_sit, final_stand


def categorized_counts(final_sit, final_stand) -> tuple[float, float]:
    """(sitting, standing) counts: 64-bit sums of the final maps."""
    return count(_grid(final_sit)), count(_grid(final_stand))


def _grid(m) -> np.ndarray:
    if isinstance(m, Tensor):
        return m.data
    return getattr(m, "grid", m)
