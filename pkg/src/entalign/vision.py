"""Strided convolutional image encoder producing an (h, w, d) patch grid."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def total_stride(conv_channels) -> int:
    return 2 ** len(conv_channels)


def init_vision_params(image_size: int, in_channels: int, conv_channels, d: int,
                       rng: np.random.Generator) -> dict[str, Tensor]:
    """Fan-in scaled (He) initialization; biases and the location bias start at zero."""
    params: dict[str, Tensor] = {}
    cin = in_channels
    for i, cout in enumerate(conv_channels):
        fan_in = 9 * cin
        params[f"vis.conv{i}.w"] = Tensor(rng.standard_normal((3, 3, cin, cout)) * np.sqrt(2.0 / fan_in),
                                          requires_grad=True)
        params[f"vis.conv{i}.b"] = Tensor(np.zeros(cout), requires_grad=True)
        cin = cout
    params["vis.proj.w"] = Tensor(rng.standard_normal((cin, d)) / np.sqrt(cin), requires_grad=True)
    params["vis.proj.b"] = Tensor(np.zeros(d), requires_grad=True)
    return params


def encode_image(images, params: dict[str, Tensor]) -> Tensor:
    """Encode a batch ``(B, H, W, C)`` (or one ``(H, W, C)`` image) into ``(B, h, w, d)``."""
    x = ad.as_tensor(images)
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    n_conv = sum(1 for k in params if k.startswith("vis.conv") and k.endswith(".w"))
    stride = 2 ** n_conv
    H, W = x.shape[1:3]
    if H % stride or W % stride:
        raise ValueError(f"input {H}x{W} is not divisible by total stride {stride}")
    for i in range(n_conv):
        x = ad.relu(ad.conv2d(x, params[f"vis.conv{i}.w"], params[f"vis.conv{i}.b"], stride=2, padding=1))
    return ad.matmul(x, params["vis.proj.w"]) + params["vis.proj.b"]


def patch_index_map(h: int, w: int) -> np.ndarray:
    """Row ``k`` of the flattened sequence is grid cell ``index_map[k] = (row, col)``."""
    return np.stack(np.divmod(np.arange(h * w), w), axis=1)


def flatten_patches(fm: Tensor) -> tuple[Tensor, np.ndarray]:
    B, h, w, d = fm.shape
    return fm.reshape(B, h * w, d), patch_index_map(h, w)


def unflatten_patches(rows, h: int, w: int):
    """Inverse of :func:`flatten_patches`; also maps a bare (h*w,) vector to (h, w)."""
    if isinstance(rows, Tensor):
        return rows.reshape((rows.shape[0], h, w) + rows.shape[2:])
    rows = np.asarray(rows)
    if rows.ndim == 1:
        return rows.reshape(h, w)
    return rows.reshape((rows.shape[0], h, w) + rows.shape[2:])
