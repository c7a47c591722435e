"""
Fourier subnetwork operator for ReelNet.

A spectral linear layer: keep the lowest Fourier modes of the input, multiply
them by a (masked) complex weight per mode, zero-pad the spectrum onto the
output grid and transform back. Padding onto a larger grid is how the layer
upsamples, so it can stand in for a whole NeRV block (conv + pixel shuffle).

Conventions (frozen, checkpoints depend on them):
  - forward FFT unnormalized, inverse divides by H*W (torch norm='backward')
  - kept rows: 0..ceil(mh/2)-1 and the last floor(mh/2) rows (negative
    frequencies); kept columns: the first mw real-FFT columns
  - the spectrum is rescaled by (H_out*W_out)/(H_in*W_in) before the inverse,
    so a constant input of 5.0 with a unit DC weight comes back as 5.0 on any
    output grid, and a kept sinusoid is scaled exactly by its complex weight
  - on a wider output grid the input Nyquist column (W_in even) is halved:
    it is no longer a Nyquist column there, and the inverse adds its twin
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import torch

from reelnet.errors import ShapeError

logger = logging.getLogger(__name__)


@dataclass
class FsoLayer:
    """Geometry (and optionally weights) of one spectral layer.

    Weights have shape (modes_h, modes_w, in_ch, out_ch). ``weights_imag`` is
    None when ``use_imaginary`` is off (the "w/o imag." ablation).
    """

    in_ch: int
    out_ch: int
    modes_h: int
    modes_w: int
    spatial_in: Tuple[int, int]
    spatial_out: Tuple[int, int]
    use_imaginary: bool = True
    weights_real: Optional[torch.Tensor] = None
    weights_imag: Optional[torch.Tensor] = None

    @property
    def weight_shape(self) -> Tuple[int, int, int, int]:
        return (self.modes_h, self.modes_w, self.in_ch, self.out_ch)

    def validate(self) -> None:
        """Raise ShapeError when the mode counts do not fit the input grid."""
        h_in, w_in = self.spatial_in
        h_out, w_out = self.spatial_out
        if h_in < 1 or w_in < 1:
            raise ShapeError(f"FSO input grid must be non-empty, got {self.spatial_in}")
        if h_out < h_in or w_out < w_in:
            raise ShapeError(f"FSO output grid {self.spatial_out} smaller than input grid {self.spatial_in}")
        if not 1 <= self.modes_h <= h_in:
            raise ShapeError(f"modes_h={self.modes_h} exceeds {h_in} available rows")
        if not 1 <= self.modes_w <= w_in // 2 + 1:
            raise ShapeError(f"modes_w={self.modes_w} exceeds {w_in // 2 + 1} real-FFT columns")


def fso_param_count(layer: FsoLayer) -> int:
    """Number of real parameters held by the layer."""
    parts = 2 if layer.use_imaginary else 1
    return layer.modes_h * layer.modes_w * layer.in_ch * layer.out_ch * parts


def rfft2(x: torch.Tensor) -> torch.Tensor:
    """Unnormalized 2-D real FFT over the last two dims."""
    return torch.fft.rfft2(x, norm='backward')


def irfft2(spectrum: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    """Inverse of rfft2 onto a (H, W) grid; divides by H*W."""
    return torch.fft.irfft2(spectrum, s=size, norm='backward')


def mode_rows(modes_h: int, height: int, device=None) -> torch.Tensor:
    """Row indices of the kept modes on a grid of the given height.

    Positive frequencies first, then negative ones, matching the weight layout.
    """
    positive = (modes_h + 1) // 2
    negative = modes_h // 2
    rows = list(range(positive)) + list(range(height - negative, height))
    return torch.tensor(rows, dtype=torch.long, device=device)


def _effective_weight(weight: torch.Tensor, mask: Optional[torch.Tensor]) -> torch.Tensor:
    if mask is None:
        return weight
    if mask.shape != weight.shape:
        raise ShapeError(f"mask shape {tuple(mask.shape)} does not match weight shape {tuple(weight.shape)}")
    return weight * mask.to(weight.dtype)


def fso_forward(
    x: torch.Tensor,
    layer: FsoLayer,
    mask_real: Optional[torch.Tensor] = None,
    mask_imag: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Apply the spectral layer to x of shape (in_ch, H, W) or (B, in_ch, H, W).

    Masks may be boolean or real (real masks carry straight-through score
    gradients during training).

    Returns:
        Tensor of shape (out_ch, H_out, W_out), batched if x was batched.
    """
    layer.validate()
    if layer.weights_real is None:
        raise ShapeError("FSO layer has no weights")
    if tuple(layer.weights_real.shape) != layer.weight_shape:
        raise ShapeError(f"FSO weight shape {tuple(layer.weights_real.shape)} != {layer.weight_shape}")

    batched = x.dim() == 4
    if not batched:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[1] != layer.in_ch or tuple(x.shape[-2:]) != tuple(layer.spatial_in):
        raise ShapeError(
            f"FSO expects (B, {layer.in_ch}, {layer.spatial_in[0]}, {layer.spatial_in[1]}), got {tuple(x.shape)}"
        )

    h_in, w_in = layer.spatial_in
    h_out, w_out = layer.spatial_out

    real = _effective_weight(layer.weights_real, mask_real)
    if layer.use_imaginary:
        if layer.weights_imag is None:
            raise ShapeError("FSO layer uses imaginary weights but none were given")
        imag = _effective_weight(layer.weights_imag, mask_imag)
    else:
        imag = torch.zeros_like(real)
    weight = torch.complex(real, imag)

    spectrum = rfft2(x)
    rows_in = mode_rows(layer.modes_h, h_in, device=x.device)
    rows_out = mode_rows(layer.modes_h, h_out, device=x.device)
    kept = spectrum[:, :, rows_in, :layer.modes_w]
    mixed = torch.einsum('bixy,xyio->boxy', kept, weight)

    out_spectrum = torch.zeros(
        x.shape[0], layer.out_ch, h_out, w_out // 2 + 1,
        dtype=spectrum.dtype, device=x.device,
    )
    scale = torch.full((layer.modes_w,), (h_out * w_out) / (h_in * w_in), dtype=real.dtype, device=x.device)
    if w_out > w_in and w_in % 2 == 0 and layer.modes_w == w_in // 2 + 1:
        scale[-1] = scale[-1] * 0.5
    out_spectrum[:, :, rows_out, :layer.modes_w] = mixed * scale
    y = irfft2(out_spectrum, (h_out, w_out))
    return y if batched else y.squeeze(0)
