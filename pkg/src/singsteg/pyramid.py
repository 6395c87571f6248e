"""Image representation, quantization, resampling and multi-scale pyramids.

Images live in two domains:

* ``uint8`` HxWx3 arrays with values in [0, 255] (what PNG files hold),
* ``float32`` HxWx3 arrays with values in [-1, 1] (what the generator,
  whose output nonlinearity is a tanh, produces and consumes).

A pyramid is a ladder of float images indexed by scale: level 0 is the
source image, level n is the source shrunk by the pyramid ratio n times,
level N is the coarsest.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

LOSSLESS_EXTENSIONS = {".png"}


def quantize(img: np.ndarray) -> np.ndarray:
    """Map a float image in [-1, 1] to uint8 in [0, 255].

    Linear map followed by round-half-away-from-zero, then clamp. The
    rounding rule is fixed so two implementations of this scheme quantize
    bit-identically.
    """
    img = np.asarray(img, dtype=np.float64)
    if not np.all(np.isfinite(img)):
        raise ValueError("quantize: image contains non-finite values")
    scaled = (img + 1.0) / 2.0 * 255.0
    rounded = np.trunc(scaled + np.copysign(0.5, scaled))
    return np.clip(rounded, 0, 255).astype(np.uint8)


def dequantize(img: np.ndarray) -> np.ndarray:
    """Map a uint8 image in [0, 255] to float32 in [-1, 1]."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ValueError(f"dequantize: expected uint8, got {img.dtype}")
    return (img.astype(np.float32) / 255.0) * 2.0 - 1.0


def to_tensor(img: np.ndarray) -> torch.Tensor:
    """HxWxC float image -> 1xCxHxW float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1).unsqueeze(0)


def to_image(t: torch.Tensor) -> np.ndarray:
    """1xCxHxW tensor -> HxWxC float32 image."""
    return t.detach().squeeze(0).permute(1, 2, 0).contiguous().numpy().astype(np.float32)


def resize(img: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear resize of a float image, half-pixel sample convention.

    Corner-aligned sampling is disabled (the half-pixel convention), the
    same kernel used for every up and down sampling in the package, so
    training and extraction see identical resampling. Output is clamped
    to [-1, 1].
    """
    if target_h < 1 or target_w < 1:
        raise ValueError(f"resize: target dims must be >= 1, got {target_h}x{target_w}")
    if img.shape[0] == target_h and img.shape[1] == target_w:
        return np.asarray(img, dtype=np.float32).copy()
    t = to_tensor(img)
    out = F.interpolate(t, size=(target_h, target_w), mode="bilinear", align_corners=False)
    return np.clip(to_image(out), -1.0, 1.0)


def resize_tensor(t: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Same bilinear kernel as :func:`resize`, staying in tensor land."""
    if t.shape[-2] == h and t.shape[-1] == w:
        return t
    return F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)


@dataclass
class ImagePyramid:
    """Multi-scale ladder of float images.

    ``levels[n]`` is the image at scale n: ``levels[0]`` is the source,
    ``levels[-1]`` the coarsest. ``ratio`` is the per-level shrink factor
    implied by the schedule.
    """

    levels: list
    ratio: float

    @property
    def stage_count(self) -> int:
        return len(self.levels)

    @property
    def dims(self) -> list:
        """[(h, w)] per level, finest first."""
        return [(lv.shape[0], lv.shape[1]) for lv in self.levels]


def pyramid_dims(h: int, w: int, stage_count: int, coarsest_min_dim: int):
    """Geometric dimension schedule for a pyramid.

    The minimum dimension follows min_dim(n) = c * (m/c)^((N-n)/N) where
    m = min(h, w), c = coarsest_min_dim and N = stage_count - 1; the
    aspect ratio is preserved and level 0 keeps the exact input dims.
    Returns ([(h, w)] finest first, ratio).
    """
    if stage_count < 1:
        raise ValueError("pyramid_dims: stage_count must be >= 1")
    m = min(h, w)
    if m < coarsest_min_dim:
        raise ValueError(
            f"pyramid_dims: image min dim {m} smaller than coarsest_min_dim {coarsest_min_dim}"
        )
    n_levels = stage_count
    big_n = n_levels - 1
    if big_n == 0:
        return [(h, w)], 1.0
    ratio = (m / coarsest_min_dim) ** (1.0 / big_n)
    dims = []
    for n in range(n_levels):
        md = coarsest_min_dim * (m / coarsest_min_dim) ** ((big_n - n) / big_n)
        scale = md / m
        if n == 0:
            dims.append((h, w))
        else:
            dims.append((max(1, int(h * scale + 0.5)), max(1, int(w * scale + 0.5))))
    return dims, ratio


def build_pyramid(img: np.ndarray, stage_count: int, coarsest_min_dim: int) -> ImagePyramid:
    """Build the multi-scale ladder of a float image.

    Level 0 is the input itself (bit-identical); deeper levels are
    bilinear downsamples along the geometric schedule.
    """
    h, w = img.shape[0], img.shape[1]
    dims, ratio = pyramid_dims(h, w, stage_count, coarsest_min_dim)
    levels = [np.asarray(img, dtype=np.float32).copy()]
    for th, tw in dims[1:]:
        levels.append(resize(img, th, tw))
    return ImagePyramid(levels=levels, ratio=ratio)


def read_image(path) -> np.ndarray:
    """Load an image file as uint8 RGB."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_image(path, img: np.ndarray) -> None:
    """Write a uint8 RGB image; format follows the file extension."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ValueError("write_image: expected uint8 image")
    Image.fromarray(img, "RGB").save(path)


def is_lossless_path(path) -> bool:
    import os

    return os.path.splitext(str(path))[1].lower() in LOSSLESS_EXTENSIONS
