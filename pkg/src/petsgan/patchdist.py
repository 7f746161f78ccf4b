"""Sliding-window patch sets, patch-distribution distances and the
low-res/high-res patch correspondence harness."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .imaging import ImageTensor, psnr

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PatchConfig:
    s: int = 7
    s_star: int | None = None  # defaults to s
    boundary: str = "valid"

    def __post_init__(self):
        if self.s < 1 or self.s % 2 == 0:
            raise ValueError(f"window size must be odd and positive, got {self.s}")
        s_star = self.s if self.s_star is None else self.s_star
        if s_star < 1 or s_star % 2 == 0 or s_star > self.s:
            raise ValueError(f"s_star must be odd and <= s, got {s_star}")
        object.__setattr__(self, "s_star", s_star)
        if self.boundary not in ("valid", "circular"):
            raise ValueError(f"unknown boundary {self.boundary!r}")


@dataclass
class PatchSet:
    patches: torch.Tensor  # [count, patch_dim]
    source_dims: tuple
    s: int = 0
    boundary: str = "valid"

    def __len__(self):
        return self.patches.shape[0]

    @property
    def patch_dim(self) -> int:
        return self.patches.shape[1]


@dataclass
class PatchDistribution:
    """Uniform empirical distribution over a patch set."""

    support: PatchSet

    @property
    def weights(self) -> torch.Tensor:
        n = len(self.support)
        return torch.full((n,), 1.0 / n, dtype=self.support.patches.dtype)


def extract_patches_1d(x, s: int) -> PatchSet:
    """Circular patches of a 1-D signal; patch j is centred on x[j]."""
    x = torch.as_tensor(x)
    d = x.shape[0]
    if s % 2 == 0 or s < 1 or s > d:
        raise ValueError(f"need odd 1 <= s <= d, got s={s}, d={d}")
    half = s // 2
    idx = (torch.arange(d)[:, None] + torch.arange(-half, half + 1)[None, :]) % d
    return PatchSet(x[idx], (d,), s, "circular")


def extract_patches_2d(img, s: int, boundary: str = "valid") -> PatchSet:
    """Row-major sliding windows of a [C, H, W] image (ImageTensor or tensor)."""
    data = img.data if isinstance(img, ImageTensor) else torch.as_tensor(img)
    if data.dim() == 2:
        data = data[None]
    c, h, w = data.shape
    if s % 2 == 0 or s < 1 or s > min(h, w):
        raise ValueError(f"need odd s <= min(H, W), got s={s} for {h}x{w}")
    x = data[None]
    if boundary == "circular":
        half = s // 2
        x = F.pad(x, (half, half, half, half), mode="circular")
    elif boundary != "valid":
        raise ValueError(f"unknown boundary {boundary!r}")
    cols = F.unfold(x, kernel_size=s)  # [1, c*s*s, L]
    return PatchSet(cols[0].T.contiguous(), (c, h, w), s, boundary)


def _as_patches(p) -> torch.Tensor:
    if isinstance(p, PatchDistribution):
        return p.support.patches
    if isinstance(p, PatchSet):
        return p.patches
    return torch.as_tensor(p)


def _min_dists(a: torch.Tensor, b: torch.Tensor, chunk: int = 2048, k: int = 8) -> torch.Tensor:
    """Exact per-row nearest-neighbour distances from a to b.

    Candidates come from the fast |a|^2 + |b|^2 - 2ab expansion; the top-k
    are then re-scored directly so exact duplicates give exactly 0.
    """
    k = min(k, b.shape[0])
    bn = (b * b).sum(1)
    out = []
    for i in range(0, a.shape[0], chunk):
        ac = a[i : i + chunk]
        d2 = (ac * ac).sum(1, keepdim=True) + bn[None] - 2 * ac @ b.T
        idx = d2.topk(k, dim=1, largest=False).indices
        exact = (ac[:, None, :] - b[idx]).norm(dim=2)
        out.append(exact.min(dim=1).values)
    return torch.cat(out)


def nn_distance(P, Q) -> float:
    """Symmetric mean nearest-neighbour L2 distance between two patch sets."""
    p = _as_patches(P).double()
    q = _as_patches(Q).double()
    if p.shape[0] == 0 or q.shape[0] == 0:
        raise ValueError("empty patch set")
    if p.shape[1] != q.shape[1]:
        raise ValueError(f"patch_dim mismatch: {p.shape[1]} vs {q.shape[1]}")
    return 0.5 * _min_dists(p, q).mean().item() + 0.5 * _min_dists(q, p).mean().item()


def sliced_wasserstein(P, Q, n_proj: int = 128, seed: int = 0) -> float:
    """Sliced 1-Wasserstein distance, used as a cross-check metric."""
    p = _as_patches(P).double()
    q = _as_patches(Q).double()
    if p.shape[1] != q.shape[1]:
        raise ValueError(f"patch_dim mismatch: {p.shape[1]} vs {q.shape[1]}")
    g = torch.Generator().manual_seed(seed)
    dirs = torch.randn(p.shape[1], n_proj, generator=g, dtype=torch.float64)
    dirs /= dirs.norm(dim=0, keepdim=True)
    pp, _ = torch.sort(p @ dirs, dim=0)
    qq, _ = torch.sort(q @ dirs, dim=0)
    # compare quantile functions on a common grid
    t = torch.linspace(0, 1, max(len(pp), len(qq)), dtype=torch.float64)

    def quantiles(v):
        pos = t * (len(v) - 1)
        lo = pos.floor().long()
        hi = pos.ceil().long()
        frac = (pos - lo)[:, None]
        return v[lo] * (1 - frac) + v[hi] * frac

    return (quantiles(pp) - quantiles(qq)).abs().mean().item()


METRICS = {"nn": nn_distance, "swd": sliced_wasserstein}


def patch_distance(P, Q, metric: str = "nn") -> float:
    return METRICS[metric](P, Q)


def image_patch_distance(a, b, s: int = 7, boundary: str = "valid", metric: str = "nn") -> float:
    """Distance between the size-s patch distributions of two images (unit range)."""
    return patch_distance(extract_patches_2d(_unit(a), s, boundary), extract_patches_2d(_unit(b), s, boundary), metric)


def _unit(img) -> torch.Tensor:
    if isinstance(img, ImageTensor):
        return img.to_unit().data
    return img


def export_patches(ps: PatchSet, path, extra: dict | None = None) -> tuple[Path, Path]:
    """Write patches as raw little-endian float32 plus a JSON header, for external plotting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = path.with_suffix(".f32")
    header = path.with_suffix(".json")
    arr = ps.patches.detach().cpu().numpy().astype("<f4")
    blob.write_bytes(arr.tobytes())
    meta = {
        "count": int(arr.shape[0]),
        "patch_dim": int(arr.shape[1]),
        "source_dims": list(ps.source_dims),
        "s": ps.s,
        "boundary": ps.boundary,
        "dtype": "float32-le",
        "data": blob.name,
    }
    if extra:
        meta.update(extra)
    header.write_text(json.dumps(meta, indent=2))
    return blob, header


def load_exported_patches(header_path) -> PatchSet:
    header_path = Path(header_path)
    meta = json.loads(header_path.read_text())
    arr = np.frombuffer((header_path.parent / meta["data"]).read_bytes(), dtype="<f4")
    arr = arr.reshape(meta["count"], meta["patch_dim"])
    return PatchSet(torch.from_numpy(arr.copy()), tuple(meta["source_dims"]), meta["s"], meta["boundary"])


class PreconditionError(RuntimeError):
    pass


@dataclass
class Prop1Report:
    dist_direct: float
    dist_matched: float
    holds: bool
    per_sample: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "dist_direct": self.dist_direct,
            "dist_matched": self.dist_matched,
            "holds": self.holds,
            "per_sample": self.per_sample,
        }


@torch.no_grad()
def verify_proposition1(I, c_I, dipnet, samples, cfg: PatchConfig = PatchConfig(), psnr_floor: float = 25.0) -> Prop1Report:
    """Compare patch statistics of IR(c) against IR(PT(c)) for low-res samples c.

    ``dipnet`` is a trained :class:`petsgan.dipnet.DIPNet`; its restoration and
    patch-transfer stages are applied separately. Distances are taken between
    the size-s patches of I and of each restored output, and between the
    size-s_star patches of c_I and of each sample.
    """
    I_u = _unit(I)
    c_I_s = c_I.to_signed().data if isinstance(c_I, ImageTensor) else c_I
    dipnet.eval()
    recon = dipnet(c_I_s[None])[0][0]
    rec_psnr = psnr((recon.clamp(-1, 1) + 1) / 2, I_u)
    if rec_psnr < psnr_floor:
        raise PreconditionError(f"restoration PSNR {rec_psnr:.2f} dB is below the {psnr_floor} dB floor")

    per_sample = []
    for c in samples:
        c_s = c.to_signed().data if isinstance(c, ImageTensor) else c
        if tuple(c_s.shape) != tuple(c_I_s.shape):
            raise ValueError(f"sample dims {tuple(c_s.shape)} != c_I dims {tuple(c_I_s.shape)}")
        direct = dipnet.ir(c_s[None])[0]
        matched = dipnet(c_s[None])[0][0]
        per_sample.append(
            {
                "dist_direct": image_patch_distance(I_u, _signed_to_unit(direct), cfg.s),
                "dist_matched": image_patch_distance(I_u, _signed_to_unit(matched), cfg.s),
                "dist_low": patch_distance(
                    extract_patches_2d(_signed_to_unit(c_I_s), cfg.s_star, cfg.boundary),
                    extract_patches_2d(_signed_to_unit(c_s), cfg.s_star, cfg.boundary),
                ),
            }
        )
    dd = float(np.mean([p["dist_direct"] for p in per_sample]))
    dm = float(np.mean([p["dist_matched"] for p in per_sample]))
    return Prop1Report(dd, dm, dm < dd, per_sample)


def _signed_to_unit(t: torch.Tensor) -> torch.Tensor:
    return ((t + 1) / 2).clamp(0, 1)
