"""Image I/O, resizing and deterministic RNG streams."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

RANGES = {"unit": (0.0, 1.0), "signed": (-1.0, 1.0)}


class ImageDecodeError(IOError):
    pass


class ImageSizeError(ValueError):
    pass


@dataclass
class ImageTensor:
    """A [channels, height, width] float tensor tagged with its value range."""

    data: torch.Tensor
    value_range: str = "unit"
    color_space: str = "RGB"

    def __post_init__(self):
        if self.value_range not in RANGES:
            raise ValueError(f"unknown value_range {self.value_range!r}")
        if self.data.dim() != 3:
            raise ValueError(f"expected [C, H, W], got shape {tuple(self.data.shape)}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def dims(self) -> tuple[int, int]:
        return self.height, self.width

    def to_signed(self) -> "ImageTensor":
        if self.value_range == "signed":
            return self
        return ImageTensor(self.data * 2.0 - 1.0, "signed", self.color_space)

    def to_unit(self) -> "ImageTensor":
        if self.value_range == "unit":
            return self
        return ImageTensor((self.data + 1.0) / 2.0, "unit", self.color_space)

    def clamped(self) -> "ImageTensor":
        lo, hi = RANGES[self.value_range]
        return ImageTensor(self.data.clamp(lo, hi), self.value_range, self.color_space)

    def check(self) -> None:
        lo, hi = RANGES[self.value_range]
        d = self.data
        if not torch.isfinite(d).all():
            raise ValueError("image contains non-finite values")
        if d.min() < lo - 1e-6 or d.max() > hi + 1e-6:
            raise ValueError(f"image values outside {self.value_range} range")

    @classmethod
    def from_signed(cls, t: torch.Tensor) -> "ImageTensor":
        """Wrap a network output in [-1, 1] as a clamped unit-range image."""
        return cls(((t.detach() + 1.0) / 2.0).clamp(0.0, 1.0), "unit")


@dataclass(frozen=True)
class Rng:
    """Named, seeded random stream. Same (seed, stream_id) gives the same draws."""

    seed: int
    stream_id: str = "default"

    @property
    def derived_seed(self) -> int:
        h = hashlib.sha256(f"{self.seed}:{self.stream_id}".encode()).digest()
        return int.from_bytes(h[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF

    def torch(self) -> torch.Generator:
        g = torch.Generator()
        g.manual_seed(self.derived_seed)
        return g

    def numpy(self) -> np.random.Generator:
        return np.random.default_rng(self.derived_seed)

    def child(self, name: str) -> "Rng":
        return Rng(self.seed, f"{self.stream_id}/{name}")


def load_image(path) -> ImageTensor:
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("RGBA", "LA", "P"):
                im = im.convert("RGBA").convert("RGB")
            elif im.mode != "RGB":
                # grayscale and friends: replicate to three channels
                im = im.convert("L").convert("RGB")
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError, SyntaxError) as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from exc
    return ImageTensor(torch.from_numpy(arr.copy()).permute(2, 0, 1).contiguous(), "unit")


def save_image(img: ImageTensor, path) -> None:
    """Write an 8-bit PNG; values are clamped then quantized by round(255 v)."""
    unit = img.to_unit().data.detach().cpu().clamp(0.0, 1.0)
    arr = torch.round(unit * 255.0).to(torch.uint8).permute(1, 2, 0).numpy()
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def resize_tensor(x: torch.Tensor, target_h: int, target_w: int, mode: str = "bicubic") -> torch.Tensor:
    """Resize a [C, H, W] or [B, C, H, W] tensor. Downscaling is anti-aliased."""
    if target_h < 1 or target_w < 1:
        raise ValueError(f"target size must be positive, got {target_h}x{target_w}")
    if mode not in ("bicubic", "bilinear", "nearest"):
        raise ValueError(f"unknown resize mode {mode!r}")
    squeeze = x.dim() == 3
    xb = x.unsqueeze(0) if squeeze else x
    if tuple(xb.shape[-2:]) == (target_h, target_w):
        return x.clone()
    if mode == "nearest":
        out = F.interpolate(xb, size=(target_h, target_w), mode="nearest")
    else:
        out = F.interpolate(xb, size=(target_h, target_w), mode=mode, align_corners=False, antialias=True)
    return out[0] if squeeze else out


def resize(img: ImageTensor, target_h: int, target_w: int, mode: str = "bicubic") -> ImageTensor:
    out = resize_tensor(img.data, target_h, target_w, mode)
    if mode == "bicubic":
        lo, hi = RANGES[img.value_range]
        # cubic kernels overshoot at edges
        out = out.clamp(lo, hi)
    return ImageTensor(out, img.value_range, img.color_space)


def _round_to(v: float, m: int) -> int:
    return max(m, int(round(v / m)) * m)


def preprocess(img: ImageTensor, max_side: int = 256, down_factor: int = 8) -> tuple[ImageTensor, ImageTensor]:
    """Fit the longer side to ``max_side`` (never upscaling) and build the low-res code.

    Both sides are rounded to the nearest multiple of ``down_factor`` so that the
    low-res image has integer dimensions.
    """
    if down_factor < 2:
        raise ValueError("down_factor must be >= 2")
    h, w = img.dims
    if h < down_factor or w < down_factor:
        raise ImageSizeError(f"image {h}x{w} is smaller than down_factor {down_factor}")
    scale = min(1.0, max_side / max(h, w))
    th, tw = _round_to(h * scale, down_factor), _round_to(w * scale, down_factor)
    while max(th, tw) > max_side:
        th, tw = (th - down_factor if th >= tw else th), (tw - down_factor if tw > th else tw)
    I = resize(img, th, tw, "bicubic")
    c_I = resize(I, th // down_factor, tw // down_factor, "bicubic")
    return I, c_I


def psnr(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0) -> float:
    mse = torch.mean((a.double() - b.double()) ** 2).item()
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(data_range**2 / mse)
