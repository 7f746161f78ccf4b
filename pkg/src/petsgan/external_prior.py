"""External-prior sample streams: GAN inversion, latent perturbation and
augmentation-based stand-ins for desk-scale runs."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from .imaging import ImageTensor, Rng, load_image, resize_tensor

log = logging.getLogger(__name__)


class ConvergenceWarning(UserWarning):
    pass


@dataclass
class LatentCode:
    z: torch.Tensor
    class_embedding: torch.Tensor | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not torch.isfinite(self.z).all():
            raise ValueError("latent code has non-finite entries")


class LinearGenerator:
    """Toy in-process generator g(z) = W z reshaped to an image."""

    def __init__(self, W: torch.Tensor, out_shape):
        self.W = W
        self.out_shape = tuple(out_shape)
        self.latent_dim = W.shape[1]
        if W.shape[0] != math.prod(self.out_shape):
            raise ValueError("W rows must equal the number of output pixels")

    def __call__(self, z: torch.Tensor) -> torch.Tensor:
        squeeze = z.dim() == 1
        zb = z[None] if squeeze else z
        out = (zb.to(self.W.dtype) @ self.W.T).reshape(-1, *self.out_shape)
        return out[0] if squeeze else out


def _pooled_features(x: torch.Tensor) -> torch.Tensor:
    """Cheap multi-scale descriptor: the signal plus 2x and 4x average pools."""
    if x.dim() < 3 or x.shape[-1] < 4 or x.shape[-2] < 4:
        return x.flatten(start_dim=1) if x.dim() > 1 else x
    xb = x if x.dim() == 4 else x[None]
    feats = [xb.flatten(1), F.avg_pool2d(xb, 2).flatten(1), F.avg_pool2d(xb, 4).flatten(1)]
    return torch.cat(feats, dim=1)


def invert(
    gen,
    I_low,
    steps: int = 500,
    rng: Rng = Rng(0, "invert"),
    lambda_pix: float = 1.0,
    lambda_feat: float = 1.0,
    feature_fn=None,
    lr: float = 0.1,
    z_init: torch.Tensor | None = None,
) -> LatentCode:
    """Find z* minimising lambda_pix*L1(gen(z), I_low) + lambda_feat*MSE(feat(gen(z)), feat(I_low)).

    Adam with cosine learning-rate decay; returns the best iterate seen.
    """
    target = I_low.data if isinstance(I_low, ImageTensor) else torch.as_tensor(I_low)
    feature_fn = feature_fn or _pooled_features
    dim = gen.latent_dim
    if z_init is None:
        z = torch.randn(dim, generator=rng.torch(), dtype=target.dtype)
    else:
        z = z_init.detach().clone().to(target.dtype)
    z.requires_grad_(True)

    def loss_of(zz):
        out = gen(zz[None])[0]
        if tuple(out.shape) != tuple(target.shape):
            raise ValueError(f"generator output {tuple(out.shape)} does not match target {tuple(target.shape)}")
        loss = out.new_zeros(())
        if lambda_pix:
            loss = loss + lambda_pix * (out - target).abs().mean()
        if lambda_feat:
            loss = loss + lambda_feat * ((feature_fn(out[None]) - feature_fn(target[None])) ** 2).mean()
        return loss

    if steps <= 0:
        with torch.no_grad():
            l0 = float(loss_of(z))
        return LatentCode(z.detach().clone(), meta={"final_loss": l0, "best_loss": l0, "steps": 0})

    opt = torch.optim.Adam([z], lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps, eta_min=lr * 1e-3)
    best_z, best_loss, first_loss = z.detach().clone(), math.inf, None
    improved = False
    for _ in range(steps):
        opt.zero_grad()
        loss = loss_of(z)
        lv = float(loss.detach())
        if first_loss is None:
            first_loss = lv
        elif lv < first_loss:
            improved = True
        if lv < best_loss:
            best_loss, best_z = lv, z.detach().clone()
        loss.backward()
        opt.step()
        sched.step()
    with torch.no_grad():
        final = float(loss_of(z))
    if final < best_loss:
        best_loss, best_z = final, z.detach().clone()
    if not improved and final >= first_loss:
        warnings.warn("inversion loss never decreased", ConvergenceWarning, stacklevel=2)
    return LatentCode(best_z, meta={"final_loss": final, "best_loss": best_loss, "steps": steps})


def perturb_and_sample(gen, z_star: LatentCode, sigma: float = 0.5, n: int = 1, rng: Rng = Rng(0, "perturb"), c_dims=None) -> list[ImageTensor]:
    """Decode n perturbed copies z* + dz, dz ~ N(0, sigma^2 I), downsampled to c_dims.

    Returned images are in signed range when the generator emits [-1, 1] data;
    the value range tag is taken from ``value_range`` on the generator if present.
    """
    if n < 1 or sigma < 0:
        raise ValueError("need n >= 1 and sigma >= 0")
    g = rng.torch()
    value_range = getattr(gen, "value_range", "signed")
    out = []
    for i in range(n):
        dz = torch.randn(z_star.z.shape, generator=g, dtype=z_star.z.dtype) * sigma
        try:
            with torch.no_grad():
                img = gen((z_star.z + dz)[None])[0]
        except Exception as exc:
            raise RuntimeError(f"generator failed on sample {i}: {exc}") from exc
        if c_dims is not None:
            img = resize_tensor(img, c_dims[0], c_dims[1], "bicubic")
        out.append(ImageTensor(img, value_range))
    return out


class PriorProvider:
    """Source of low-res layout samples for the external-prior regulariser."""

    kind = "abstract"

    def __init__(self, c_dims, value_range: str = "unit"):
        self.c_dims = tuple(c_dims)
        self.value_range = value_range
        self.debug = False

    def _draw(self, g: torch.Generator) -> torch.Tensor:
        raise NotImplementedError

    def sample(self, rng) -> ImageTensor:
        g = rng.torch() if isinstance(rng, Rng) else rng
        img = ImageTensor(self._draw(g), self.value_range)
        if self.debug:
            self._check(img)
        return img

    def sample_batch(self, n: int, g: torch.Generator) -> torch.Tensor:
        """[n, C, h, w] batch in signed range, the networks' working range."""
        imgs = [self.sample(g).to_signed().data for _ in range(n)]
        return torch.stack(imgs)

    def _check(self, img: ImageTensor):
        if img.dims != self.c_dims:
            raise ValueError(f"provider emitted {img.dims}, expected {self.c_dims}")
        img.check()


AUGMENTATIONS = ("identity", "crop", "flip", "jitter", "affine")


class SyntheticProvider(PriorProvider):
    """Random augmentation chain on I followed by downsampling to c_dims."""

    kind = "synthetic_augmentation"

    def __init__(self, I: ImageTensor, c_dims, aug_spec, crop_scale=(0.5, 1.0), jitter=0.1, max_rotate_deg=10.0):
        super().__init__(c_dims, "unit")
        aug = set(aug_spec)
        if not aug:
            raise ValueError("aug_spec must enable at least one augmentation")
        unknown = aug - set(AUGMENTATIONS)
        if unknown:
            raise ValueError(f"unknown augmentations {sorted(unknown)}")
        self.I = I.to_unit().data
        self.aug = aug
        self.crop_scale = crop_scale
        self.jitter = jitter
        self.max_rotate = math.radians(max_rotate_deg)

    def _uniform(self, g, lo, hi):
        return lo + (hi - lo) * torch.rand((), generator=g).item()

    def _draw(self, g):
        x = self.I
        _, H, W = x.shape
        if "affine" in self.aug:
            ang = self._uniform(g, -self.max_rotate, self.max_rotate)
            sc = self._uniform(g, 0.9, 1.1)
            tx, ty = self._uniform(g, -0.1, 0.1), self._uniform(g, -0.1, 0.1)
            cos, sin = math.cos(ang) / sc, math.sin(ang) / sc
            theta = torch.tensor([[cos, -sin, tx], [sin, cos, ty]], dtype=x.dtype)[None]
            grid = F.affine_grid(theta, (1, *x.shape), align_corners=False)
            x = F.grid_sample(x[None], grid, mode="bilinear", padding_mode="reflection", align_corners=False)[0]
        if "crop" in self.aug:
            area = self._uniform(g, *self.crop_scale)
            aspect = math.exp(self._uniform(g, math.log(3 / 4), math.log(4 / 3)))
            ch = min(H, max(1, round(math.sqrt(area / aspect) * H)))
            cw = min(W, max(1, round(math.sqrt(area * aspect) * W)))
            top = int(torch.randint(0, H - ch + 1, (), generator=g))
            left = int(torch.randint(0, W - cw + 1, (), generator=g))
            x = x[:, top : top + ch, left : left + cw]
        if "jitter" in self.aug:
            j = self.jitter
            bright = self._uniform(g, 1 - j, 1 + j)
            contrast = self._uniform(g, 1 - j, 1 + j)
            mean = x.mean()
            x = ((x - mean) * contrast + mean) * bright
        x = resize_tensor(x, *self.c_dims, "bicubic").clamp(0.0, 1.0)
        if "flip" in self.aug and torch.rand((), generator=g).item() < 0.5:
            x = x.flip(-1)
        return x


class GeneratorProvider(PriorProvider):
    """Perturbations of an inverted latent code, decoded and downsampled.

    Draws are served from a pool refreshed every ``pool_size`` samples.
    """

    kind = "pretrained_generator"

    def __init__(self, gen, z_star: LatentCode, c_dims, sigma: float = 0.5, pool_size: int = 32 * 64, seed: int = 0):
        super().__init__(c_dims, getattr(gen, "value_range", "signed"))
        self.gen = gen
        self.z_star = z_star
        self.sigma = sigma
        self.pool_size = pool_size
        self._pool: list[torch.Tensor] = []
        self._refills = 0
        self._seed = seed

    def _refill(self):
        rng = Rng(self._seed, f"generator-pool-{self._refills}")
        self._refills += 1
        self._pool = [im.data for im in perturb_and_sample(self.gen, self.z_star, self.sigma, self.pool_size, rng, self.c_dims)]

    def _draw(self, g):
        if not self._pool:
            self._refill()
        i = int(torch.randint(0, len(self._pool), (), generator=g))
        return self._pool[i]


class DirectoryProvider(PriorProvider):
    """Pre-generated prior images (PNG/JPEG) read from a directory."""

    kind = "pretrained_generator"

    def __init__(self, directory, c_dims):
        super().__init__(c_dims, "unit")
        files = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
        if not files:
            raise ValueError(f"no prior images found in {directory}")
        self.images = [resize_tensor(load_image(p).data, *self.c_dims, "bicubic").clamp(0, 1) for p in files]

    def _draw(self, g):
        return self.images[int(torch.randint(0, len(self.images), (), generator=g))]


def synthetic_provider(I: ImageTensor, c_dims, aug_spec=("crop", "flip", "jitter", "affine")) -> SyntheticProvider:
    return SyntheticProvider(I, c_dims, aug_spec)
