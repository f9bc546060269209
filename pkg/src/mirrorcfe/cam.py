"""Class activation maps and the CAM-guided spatial prior.

CAMs come straight from the head weights applied to the last feature map
before pooling. Source and target CAMs are thresholded and unioned into a
binary mask whose size grows with the step factor k; the mask gates where
the feature editor may change the skip-connection features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class Cam:
    unnormalized: np.ndarray  # (|classes|, H_l, W_l)
    normalized: np.ndarray  # same shape, each channel in [0, 1]


def cam(W: np.ndarray, f_last: np.ndarray) -> Cam:
    """U_c[h,w] = sum_n W[n,c] f[n,h,w]; N^c = max(U^c,0)/max(U^c).

    A channel with no positive entry normalizes to all zeros.
    """
    if W.shape[0] != f_last.shape[0]:
        raise ad.ShapeError("cam", W.shape, f_last.shape)
    u = np.einsum("nc,nhw->chw", W, f_last)
    peak = u.max(axis=(1, 2), keepdims=True)
    normalized = np.where(peak > 0.0, np.maximum(u, 0.0) / np.where(peak > 0.0, peak, 1.0), 0.0)
    return Cam(unnormalized=u, normalized=normalized)


def rho(k: float, rho_lower: float, rho_upper: float) -> float:
    """Binarization threshold min(max(1-k, rho_lower), rho_upper)."""
    if not (0.0 <= rho_lower <= rho_upper <= 1.0):
        raise ValueError(f"need 0 <= rho_lower <= rho_upper <= 1, got {rho_lower}, {rho_upper}")
    if not (0.0 <= k <= 1.0):
        raise ValueError(f"step factor k={k} outside [0, 1]")
    return min(max(1.0 - k, rho_lower), rho_upper)


def nearest_upsample(mask: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = mask.shape
    th, tw = shape
    rows = (np.arange(th) * h) // th
    cols = (np.arange(tw) * w) // tw
    return mask[np.ix_(rows, cols)]


@dataclass(frozen=True)
class PriorMask:
    mask: np.ndarray  # binary (H_l, W_l)
    threshold: float
    k: float
    per_layer: dict[int, np.ndarray]  # layer index -> binary (H_i, W_i)


def prior_mask(cam_source: np.ndarray, cam_target: np.ndarray, threshold: float,
               k: float, layer_shapes: dict[int, tuple[int, int]]) -> PriorMask:
    """Union of the binarized source/target CAMs, upsampled per tapped layer."""
    if cam_source.shape != cam_target.shape:
        raise ad.ShapeError("prior_mask", cam_source.shape, cam_target.shape)
    mask = ((cam_source > threshold) | (cam_target > threshold)).astype(np.float64)
    per_layer = {i: nearest_upsample(mask, shape) for i, shape in layer_shapes.items()}
    return PriorMask(mask=mask, threshold=threshold, k=k, per_layer=per_layer)


@dataclass(frozen=True)
class SpeLayerShape:
    """Geometry of one tapped skip connection relative to the last feature map."""

    channels: int  # C_i
    size: int  # H_i == W_i
    latent_channels: int  # C_l
    latent_size: int  # H_l == W_l

    @property
    def pool_steps(self) -> int:
        steps = 0
        size = self.size
        while size > self.latent_size:
            size //= 2
            steps += 1
        if size != self.latent_size:
            raise ValueError(f"layer size {self.size} not a power-of-two multiple of {self.latent_size}")
        return steps


def init_spe_params(shape: SpeLayerShape, rng: np.random.Generator, prefix: str) -> dict[str, np.ndarray]:
    """1x1-conv bottleneck (C_i -> C_l) and decoder (2*C_l -> C_i)."""
    return {
        f"{prefix}_bottleneck_w": rng.normal(0.0, np.sqrt(2.0 / shape.channels),
                                             (shape.latent_channels, shape.channels, 1, 1)),
        f"{prefix}_bottleneck_b": np.zeros(shape.latent_channels),
        f"{prefix}_decoder_w": rng.normal(0.0, np.sqrt(2.0 / (2 * shape.latent_channels)),
                                          (shape.channels, 2 * shape.latent_channels, 1, 1)),
        f"{prefix}_decoder_b": np.zeros(shape.channels),
    }


def spe_transform(f_s_i: ad.Tensor, f_k_last: ad.Tensor, params: dict[str, ad.Tensor],
                  shape: SpeLayerShape, prefix: str) -> ad.Tensor:
    """u = decoder(concat(bottleneck(f_s_i) pooled to latent size, f_k_last)).

    The decoder output is projected back to the tapped layer's spatial size by
    nearest-neighbor upsampling. Differentiable end-to-end.
    """
    if f_s_i.shape[1] != shape.channels or f_s_i.shape[2] != shape.size:
        raise ad.ShapeError("spe_transform", f_s_i.shape, (shape.channels, shape.size, shape.size))
    h = ad.conv2d(f_s_i, params[f"{prefix}_bottleneck_w"], params[f"{prefix}_bottleneck_b"])
    for _ in range(shape.pool_steps):
        h = ad.avgpool2(h)
    h = ad.concat_channels(h, f_k_last)
    h = ad.conv2d(h, params[f"{prefix}_decoder_w"], params[f"{prefix}_decoder_b"])
    for _ in range(shape.pool_steps):
        h = ad.upsample2(h)
    return h


def csp_mix(f_s_i: ad.Tensor, u_k_i: ad.Tensor, mask: np.ndarray) -> ad.Tensor:
    """f' = (1 - M) * f_s + M * u, mask broadcast over batch and channels."""
    if f_s_i.shape != u_k_i.shape:
        raise ad.ShapeError("csp_mix", f_s_i.shape, u_k_i.shape)
    if mask.shape != tuple(f_s_i.shape[-2:]):
        raise ad.ShapeError("csp_mix.mask", mask.shape, f_s_i.shape)
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ValueError("csp_mix requires a binary mask")
    m = np.broadcast_to(mask, f_s_i.shape).copy()
    return ad.add(ad.mul(f_s_i, ad.constant(1.0 - m)), ad.mul(u_k_i, ad.constant(m)))
