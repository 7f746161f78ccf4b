"""Evaluation metrics (SIFID, feature diversity, patch distance) and the
downstream applications: high-resolution plug-in restoration and
reconstruction-only manipulation."""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dipnet import IrNet, fit_dipnet
from .imaging import ImageTensor, Rng, psnr, resize, resize_tensor
from .patchdist import image_patch_distance


class FeatureExtractor:
    """Maps an image to per-location features of shape [n_locations, feat_dim]."""

    kind = "abstract"
    feat_dim: int

    def __call__(self, img) -> torch.Tensor:
        raise NotImplementedError


class RandomConvFeatures(FeatureExtractor):
    """Frozen random 3-layer conv net; deterministic per seed."""

    kind = "fixed_random"

    def __init__(self, feat_dim: int = 32, seed: int = 0, in_channels: int = 3):
        g = torch.Generator().manual_seed(seed)
        self.feat_dim = feat_dim
        dims = [in_channels, feat_dim, feat_dim, feat_dim]
        self.weights = []
        for cin, cout in zip(dims[:-1], dims[1:]):
            w = torch.randn(cout, cin, 3, 3, generator=g, dtype=torch.float64) * math.sqrt(2.0 / (cin * 9))
            self.weights.append(w)

    @torch.no_grad()
    def __call__(self, img) -> torch.Tensor:
        x = img.to_signed().data if isinstance(img, ImageTensor) else img
        x = x.double()[None] if x.dim() == 3 else x.double()
        for i, w in enumerate(self.weights):
            x = F.conv2d(x, w, padding=1)
            if i < len(self.weights) - 1:
                x = F.leaky_relu(x, 0.2)
                x = F.avg_pool2d(x, 2) if i == 0 else x
        return x[0].flatten(1).T.contiguous()


def _as_features(x, fx):
    if isinstance(x, torch.Tensor) and x.dim() == 2:
        return x.double()
    return fx(x)


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """||mu1-mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}); the root is taken of the
    symmetrized product S1^{1/2} S2 S1^{1/2}, clamping small negative eigenvalues."""
    mu1, mu2 = np.asarray(mu1, np.float64), np.asarray(mu2, np.float64)
    cov1, cov2 = np.atleast_2d(cov1).astype(np.float64), np.atleast_2d(cov2).astype(np.float64)
    w1, v1 = np.linalg.eigh((cov1 + cov1.T) / 2)
    root1 = (v1 * np.sqrt(np.clip(w1, 0, None))) @ v1.T
    m = root1 @ cov2 @ root1
    w = np.linalg.eigvalsh((m + m.T) / 2)
    tr_sqrt = np.sqrt(np.clip(w, 0, None)).sum()
    d = float(((mu1 - mu2) ** 2).sum() + np.trace(cov1) + np.trace(cov2) - 2 * tr_sqrt)
    return max(d, 0.0)


def sifid(real, fake, fx: FeatureExtractor | None = None) -> float:
    """Fréchet distance between Gaussians fit to per-location features.

    `real`/`fake` are images or precomputed [n_loc, feat_dim] feature arrays.
    Falls back to diagonal covariances when there are fewer locations than
    feature dimensions.
    """
    if isinstance(real, ImageTensor) and isinstance(fake, ImageTensor) and real.dims != fake.dims:
        raise ValueError(f"sifid needs equal dims, got {real.dims} and {fake.dims}")
    fx = fx or RandomConvFeatures()
    a, b = _as_features(real, fx).numpy(), _as_features(fake, fx).numpy()
    mu1, mu2 = a.mean(0), b.mean(0)
    n, d = min(len(a), len(b)), a.shape[1]
    if n < d or n < 2:
        warnings.warn(f"{n} feature locations < feat_dim {d}; using diagonal covariances", stacklevel=2)
        var1 = a.var(0, ddof=1) if len(a) > 1 else np.zeros(d)
        var2 = b.var(0, ddof=1) if len(b) > 1 else np.zeros(d)
        return float(((mu1 - mu2) ** 2).sum() + ((np.sqrt(var1) - np.sqrt(var2)) ** 2).sum())
    return frechet_distance(mu1, np.cov(a, rowvar=False), mu2, np.cov(b, rowvar=False))


def _normalize(f: torch.Tensor) -> torch.Tensor:
    return f / f.norm(dim=1, keepdim=True).clamp_min(1e-10)


def feature_distance(fa: torch.Tensor, fb: torch.Tensor) -> float:
    """Mean over locations of the L2 distance between unit-normalized features."""
    return (_normalize(fa) - _normalize(fb)).norm(dim=1).mean().item()


def diversity(samples, fx: FeatureExtractor | None = None, normalize: bool = True) -> float:
    """Mean per-location feature distance averaged over unordered sample pairs.

    Samples may be images or precomputed feature arrays.
    """
    if len(samples) < 2:
        raise ValueError("diversity needs at least 2 samples")
    fx = fx or RandomConvFeatures()
    feats = [_as_features(s, fx) for s in samples]
    if len({tuple(f.shape) for f in feats}) != 1:
        raise ValueError("all samples must share dims")
    dist = feature_distance if normalize else (lambda a, b: (a - b).norm(dim=1).mean().item())
    pairs = list(itertools.combinations(range(len(feats)), 2))
    return float(sum(dist(feats[i], feats[j]) for i, j in pairs) / len(pairs))


def patch_score(I: ImageTensor, samples, s: int = 7) -> float:
    """Mean patch distance of each sample to the exemplar (unit range)."""
    ref = I.to_unit().data
    return float(np.mean([image_patch_distance(ref, x.to_unit().data, s=s) for x in samples]))


def noise_patch_score(I: ImageTensor, n: int = 3, s: int = 7, rng: Rng = Rng(0, "noise-ref")) -> float:
    """Patch distance of uniform-noise images to I: the normalizer for patch_score."""
    g = rng.torch()
    ref = I.to_unit().data
    return float(np.mean([image_patch_distance(ref, torch.rand(ref.shape, generator=g), s=s) for _ in range(n)]))


@dataclass
class EvalReport:
    sifid: float
    diversity: float
    patch_dist: float
    train_seconds: float
    n_samples: int
    extractor: str = "fixed_random"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for k in ("sifid", "diversity", "patch_dist", "train_seconds"):
            v = getattr(self, k)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{k} must be finite and nonnegative, got {v}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def evaluate(I: ImageTensor, samples, train_seconds: float = 0.0, fx: FeatureExtractor | None = None) -> EvalReport:
    fx = fx or RandomConvFeatures()
    sif = float(np.mean([sifid(I, s, fx) for s in samples]))
    div = diversity(samples, fx) if len(samples) > 1 else 0.0
    return EvalReport(sif, div, patch_score(I, samples), float(train_seconds), len(samples), fx.kind)


# ---- applications -------------------------------------------------------


def param_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class HiresResult:
    ir: IrNet
    syntheses: list
    psnr: float
    seconds: float


def hires_upscale(base_ckpt, I_hi: ImageTensor, factor: int = 4, steps: int = 600, crop: int = 128,
                  batch: int = 4, lr: float = 1e-3, width: int = 32, n_blocks: int = 4, n_samples: int = 4,
                  rng: Rng = Rng(0, "hires")) -> HiresResult:
    """Train a fresh x`factor` IrNet on (downsampled I_hi, I_hi) crops with an L1
    reconstruction loss and apply it to the base checkpoint's syntheses.

    The base networks are only read; their parameter hashes are checked.
    """
    if factor < 1 or factor & (factor - 1):
        raise ValueError(f"factor must be a power of 2, got {factor}")
    if I_hi.height % factor or I_hi.width % factor:
        raise ValueError(f"I_hi dims {I_hi.dims} not divisible by {factor}")
    from .trainer import generate_samples

    before = {k: param_hash(m) for k, m in base_ckpt.models.named().items()}
    t0 = time.perf_counter()
    hi = I_hi.to_signed().data
    lo = resize_tensor(hi, hi.shape[1] // factor, hi.shape[2] // factor, "bicubic").clamp(-1, 1)
    crop = min(crop, hi.shape[1], hi.shape[2])
    crop -= crop % factor
    c = crop // factor
    torch.manual_seed(rng.derived_seed)
    ir = IrNet(factor, width, n_blocks, hi.shape[0])
    opt = torch.optim.Adam(ir.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(steps, 1), eta_min=lr * 0.05)
    g = rng.child("crops").torch()
    for _ in range(steps):
        ys = torch.randint(0, lo.shape[1] - c + 1, (batch,), generator=g).tolist()
        xs = torch.randint(0, lo.shape[2] - c + 1, (batch,), generator=g).tolist()
        x = torch.stack([lo[:, y : y + c, x0 : x0 + c] for y, x0 in zip(ys, xs)])
        t = torch.stack([hi[:, y * factor : (y + c) * factor, x0 * factor : (x0 + c) * factor] for y, x0 in zip(ys, xs)])
        loss = (ir(x) - t).abs().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
    ir.eval()
    with torch.no_grad():
        rec = ir(lo[None])[0].clamp(-1, 1)
        score = psnr(ImageTensor.from_signed(rec).data, I_hi.to_unit().data)
        syn = []
        for s in generate_samples(base_ckpt, n_samples, rng=rng.child("samples")):
            syn.append(ImageTensor.from_signed(ir(s.to_signed().data[None])[0]))
    seconds = time.perf_counter() - t0
    after = {k: param_hash(m) for k, m in base_ckpt.models.named().items()}
    if before != after:
        raise AssertionError("base networks changed during high-res plug-in training")
    return HiresResult(ir, syn, score, seconds)


TASKS = ("harmonize", "style_transfer", "edit", "paint2image")
# Code noise for manipulation fits. Wider than the training default so IR tolerates
# foreign code patches without disturbing the rest of the image.
MANIP_DELTA_SIGMA = 0.2


def manipulate(task: str, content: ImageTensor, I: ImageTensor, dipnet=None, down_factor: int = 8,
               steps: int = 1500, s: int = 3, rng: Rng = Rng(0, "manipulate"), hard: bool = False,
               delta_sigma: float = MANIP_DELTA_SIGMA) -> ImageTensor:
    """IR(PT(downsample(content))) with a reconstruction-only DIPNet fit on I.

    All tasks share this path; they differ only in what `content` is.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    h, w = I.dims
    if h % down_factor or w % down_factor:
        raise ValueError(f"exemplar dims {I.dims} must be multiples of {down_factor}")
    c_I = resize(I, h // down_factor, w // down_factor, "bicubic")
    if dipnet is None:
        dipnet = fit_dipnet(I, c_I, steps=steps, s=s, rng=rng, delta_sigma=delta_sigma)
    ch, cw = content.dims
    th = max(down_factor, round(ch / down_factor) * down_factor)
    tw = max(down_factor, round(cw / down_factor) * down_factor)
    if (th, tw) != (ch, cw):
        warnings.warn(f"content {ch}x{cw} resized to {th}x{tw} for x{down_factor} restoration", stacklevel=2)
        content = resize(content, th, tw, "bicubic")
    low = resize(content, th // down_factor, tw // down_factor, "bicubic").to_signed().data[None]
    with torch.no_grad():
        out, _ = dipnet(low, hard=hard)
    return ImageTensor.from_signed(out[0])


def noise_codes(n: int, c_dims, channels: int = 3, rng: Rng = Rng(0, "prop1-noise")) -> list[ImageTensor]:
    """Uniform noise low-res codes in the signed range."""
    g = rng.torch()
    return [ImageTensor(torch.rand(channels, *c_dims, generator=g) * 2 - 1, "signed") for _ in range(n)]


def run_prop1(image: ImageTensor, n_samples: int = 20, steps: int = 1500, max_side: int = 64, down_factor: int = 8,
              s: int = 7, s_star: int = 3, seed: int = 0):
    """Fit a reconstruction-only DIPNet on one image and compare IR(c) with IR(PT(c)) on noise codes."""
    from .patchdist import PatchConfig, verify_proposition1
    from .imaging import preprocess

    I, c_I = preprocess(image, max_side, down_factor)
    f = fit_dipnet(I, c_I, steps=steps, s=s_star, rng=Rng(seed, "prop1"))
    samples = noise_codes(n_samples, c_I.dims, c_I.channels, Rng(seed, "prop1-noise"))
    return verify_proposition1(I, c_I, f, samples, PatchConfig(s, s_star))
