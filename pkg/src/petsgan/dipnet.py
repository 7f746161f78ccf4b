"""DIPNet: differentiable patch transfer onto the exemplar's low-res patch bank,
followed by a restoration (upsampling) network."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .depnet import TrainingDivergence
from .imaging import ImageTensor, Rng

log = logging.getLogger(__name__)


@dataclass
class AttentionMap:
    A: torch.Tensor  # [n_query, n_key], rows sum to 1
    argmax: torch.Tensor  # [n_query]

    @property
    def top(self) -> torch.Tensor:
        """a_{i, i*} for each query row."""
        return self.A.gather(-1, self.argmax[..., None])[..., 0]

    def frobenius_sq(self) -> torch.Tensor:
        return (self.A**2).sum()


class PatchEmbedder(nn.Module):
    """Conv features whose receptive window is exactly one s x s patch.

    Applied to a whole image with valid padding, output location i is the
    embedding of patch i in row-major order. Identical patches therefore get
    identical embeddings.
    """

    def __init__(self, s=7, in_channels: int = 3, width: int = 32, seed: int = 0, trainable: bool = True):
        super().__init__()
        self.s = _pair(s)
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, width, s),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, width, 1),
        )
        g = torch.Generator().manual_seed(seed)
        for m in self.net:
            if isinstance(m, nn.Conv2d):
                fan_in = m.weight[0].numel()
                m.weight.data = torch.randn(m.weight.shape, generator=g) * math.sqrt(2.0 / fan_in)
                m.bias.data.zero_()
        self.requires_grad_(trainable)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        """[B, C, H, W] -> [B, n_patches, width]."""
        return self.net(img).flatten(2).transpose(1, 2)

    def embed_patches(self, patches: torch.Tensor, channels: int = 3) -> torch.Tensor:
        """Embed flattened [n, C*s*s] patches directly."""
        x = patches.reshape(-1, channels, *self.s)
        return self.net(x).flatten(1)


def attention_from_similarities(b: torch.Tensor, temperature: float = 0.07) -> AttentionMap:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    A = torch.softmax(b / temperature, dim=-1)
    # torch.argmax returns the first maximal index, matching the lowest-index tie rule
    return AttentionMap(A, torch.argmax(A, dim=-1))


def attention_from_embeddings(q: torch.Tensor, k: torch.Tensor, temperature: float = 0.07, key_tile: int = 4096) -> AttentionMap:
    """Row-softmax of cosine similarities between query and key embeddings.

    q: [..., n_query, E], k: [..., n_key, E]. Similarities are computed in key
    tiles of at most ``key_tile`` columns; the result is exact.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    qn = q.norm(dim=-1, keepdim=True)
    kn = k.norm(dim=-1, keepdim=True)
    if (qn == 0).any() or (kn == 0).any():
        log.debug("zero-norm patch embedding; its similarities are set to 0")
    qu = q / qn.clamp_min(1e-12)
    ku = k / kn.clamp_min(1e-12)
    tiles = [qu @ ku[..., j : j + key_tile, :].transpose(-1, -2) for j in range(0, ku.shape[-2], key_tile)]
    return attention_from_similarities(torch.cat(tiles, dim=-1), temperature)


def attention(query_patches, key_patches, embedder: PatchEmbedder, temperature: float = 0.07) -> AttentionMap:
    """Attention between two patch sets (PatchSet or [n, C*s*s] tensors)."""
    q = getattr(query_patches, "patches", query_patches)
    k = getattr(key_patches, "patches", key_patches)
    if q.shape[-1] != k.shape[-1]:
        raise ValueError("query and key patch dims differ")
    channels = q.shape[-1] // (embedder.s[0] * embedder.s[1])
    return attention_from_embeddings(embedder.embed_patches(q, channels), embedder.embed_patches(k, channels), temperature)


def _pair(s) -> tuple[int, int]:
    return (s, s) if isinstance(s, int) else tuple(s)


def fold_patches(patches: torch.Tensor, size, s) -> torch.Tensor:
    """Average overlapping [B, n, C*s*s] valid-window patches back into [B, C, H, W]."""
    cols = patches.transpose(1, 2)
    summed = F.fold(cols, output_size=tuple(size), kernel_size=_pair(s))
    ones = torch.ones(1, cols.shape[1], cols.shape[2], dtype=patches.dtype)
    count = F.fold(ones, output_size=tuple(size), kernel_size=_pair(s))
    return summed / count


def transfer_with_attention(key_patches: torch.Tensor, att: AttentionMap, size, s, hard: bool = False) -> torch.Tensor:
    """Replace query patch i by a_{i,i*} * key_{i*} (or key_{i*} in hard mode) and fold."""
    B = att.A.shape[0] if att.A.dim() == 3 else 1
    A = att.A if att.A.dim() == 3 else att.A[None]
    idx = att.argmax if att.argmax.dim() == 2 else att.argmax[None]
    kp = key_patches if key_patches.dim() == 3 else key_patches[None].expand(B, -1, -1)
    chosen = kp.gather(1, idx[..., None].expand(-1, -1, kp.shape[-1]))
    if not hard:
        chosen = chosen * A.gather(-1, idx[..., None])
    return fold_patches(chosen, size, s)


def _unfold(x: torch.Tensor, s) -> torch.Tensor:
    return F.unfold(x, kernel_size=_pair(s)).transpose(1, 2)


def patch_transfer(c, c_I, embedder: PatchEmbedder, s, temperature: float = 0.07, hard: bool = False):
    """Patch-transfer c onto c_I's patch bank. Accepts ImageTensors or [B, C, H, W] tensors.

    Returns (c_matched, AttentionMap) in the input's form.
    """
    wrap = isinstance(c, ImageTensor)
    x = c.to_signed().data[None] if wrap else c
    ref = c_I.to_signed().data[None] if isinstance(c_I, ImageTensor) else c_I
    if ref.dim() == 3:
        ref = ref[None]
    if tuple(x.shape[-3:]) != tuple(ref.shape[-3:]) and x.shape[-3] != ref.shape[-3]:
        raise ValueError("c and c_I channel counts differ")
    if wrap and tuple(x.shape[-2:]) != tuple(ref.shape[-2:]):
        raise ValueError(f"c dims {tuple(x.shape[-2:])} != c_I dims {tuple(ref.shape[-2:])}")
    att = attention_from_embeddings(embedder(x), embedder(ref)[0], temperature)
    out = transfer_with_attention(_unfold(ref, s)[0], att, x.shape[-2:], s, hard)
    if wrap:
        return ImageTensor(out[0], "signed"), AttentionMap(att.A[0], att.argmax[0])
    return out, att


class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(nn.Conv2d(ch, ch, 3, padding=1), nn.LeakyReLU(0.2), nn.Conv2d(ch, ch, 3, padding=1))

    def forward(self, x):
        return x + self.body(x)


class IrNet(nn.Module):
    """Residual restoration net with learned x2 upsampling stages.

    Output = bilinear upsample of the input + learned residual, so an untrained
    net already produces a blurry enlargement.
    """

    def __init__(self, scale: int = 8, width: int = 32, n_blocks: int = 8, in_channels: int = 3):
        super().__init__()
        if scale < 1 or scale & (scale - 1):
            raise ValueError(f"scale must be a power of 2, got {scale}")
        self.scale = scale
        self.head = nn.Conv2d(in_channels, width, 3, padding=1)
        self.body = nn.Sequential(*[ResBlock(width) for _ in range(n_blocks)], nn.Conv2d(width, width, 3, padding=1))
        ups = []
        for _ in range(int(math.log2(scale))):
            ups += [nn.Conv2d(width, width * 4, 3, padding=1), nn.PixelShuffle(2), nn.LeakyReLU(0.2)]
        self.up = nn.Sequential(*ups)
        self.tail = nn.Conv2d(width, in_channels, 3, padding=1)

    def forward(self, x):
        f = self.head(x)
        f = f + self.body(f)
        res = self.tail(self.up(f))
        if self.scale == 1:
            return x + res
        base = F.interpolate(x, scale_factor=self.scale, mode="bilinear", align_corners=False)
        return base + res


class DIPNet(nn.Module):
    """F = IR o PT with the exemplar's low-res image held as the key bank."""

    def __init__(self, c_I: torch.Tensor, s: int = 7, scale: int = 8, temperature: float = 0.07,
                 embed_width: int = 32, ir_width: int = 32, ir_blocks: int = 8, seed: int = 0, trainable_embedder: bool = True):
        super().__init__()
        if c_I.dim() == 3:
            c_I = c_I[None]
        self.register_buffer("c_I", c_I.clone())
        self.s = s
        self.temperature = temperature
        self.embedder = PatchEmbedder(s, c_I.shape[1], embed_width, seed=seed, trainable=trainable_embedder)
        self.ir = IrNet(scale, ir_width, ir_blocks, c_I.shape[1])

    @property
    def scale(self) -> int:
        return self.ir.scale

    def pt(self, c: torch.Tensor, hard: bool = False):
        keys = _unfold(self.c_I, self.s)[0]
        att = attention_from_embeddings(self.embedder(c), self.embedder(self.c_I)[0], self.temperature)
        return transfer_with_attention(keys, att, c.shape[-2:], self.s, hard), att

    def forward(self, c: torch.Tensor, hard: bool = False):
        matched, att = self.pt(c, hard)
        return self.ir(matched), att


def restore(ir: IrNet, c_any) -> ImageTensor:
    x = c_any.to_signed().data[None] if isinstance(c_any, ImageTensor) else c_any[None]
    with torch.no_grad():
        return ImageTensor(ir(x)[0], "signed")


def sparsity(att: AttentionMap) -> torch.Tensor:
    """||A||_F^2 averaged over the batch."""
    A = att.A if att.A.dim() == 3 else att.A[None]
    return (A**2).sum(dim=(1, 2)).mean()


def internal_prior_loss(f: DIPNet, I: torch.Tensor, c_I: torch.Tensor, delta_sigma: float = 0.1,
                        lambda_sparse: float = 0.01, rng: torch.Generator | None = None, step=None, return_parts=False):
    """||F(c_I + dc) - I||_1 - lambda_sparse * ||A||_F^2 with dc ~ N(0, delta_sigma^2).

    I and c_I are signed-range [B, C, H, W] tensors; delta_sigma is relative to
    the [-1, 1] range (so it is scaled by 2).
    """
    if delta_sigma < 0:
        raise ValueError("delta_sigma must be non-negative")
    x = c_I
    if delta_sigma > 0:
        x = c_I + torch.randn(c_I.shape, generator=rng) * (2.0 * delta_sigma)
    out, att = f(x)
    recon = (out - I).abs().mean()
    sp = sparsity(att)
    loss = recon - lambda_sparse * sp
    if not torch.isfinite(loss):
        raise TrainingDivergence("non-finite internal prior loss", step)
    if return_parts:
        return loss, {"recon": recon.item(), "sparsity": sp.item(), "mean_top": att.top.mean().item()}
    return loss


def fit_dipnet(I: ImageTensor, c_I: ImageTensor, steps: int = 1500, lr: float = 1e-3, s: int = 3,
               delta_sigma: float = 0.1, lambda_sparse: float = 0.01, temperature: float = 0.07,
               rng: Rng = Rng(0, "dipnet"), scale: int | None = None, ir_width: int = 32, ir_blocks: int = 8,
               dipnet: DIPNet | None = None) -> DIPNet:
    """Reconstruction-only DIPNet training on a single (c_I, I) pair."""
    I_s = I.to_signed().data[None]
    c_s = c_I.to_signed().data[None]
    if scale is None:
        scale = I.height // c_I.height
    torch.manual_seed(rng.derived_seed)
    f = dipnet or DIPNet(c_s[0], s=s, scale=scale, temperature=temperature, ir_width=ir_width, ir_blocks=ir_blocks, seed=rng.derived_seed % (2**31))
    opt = torch.optim.Adam([p for p in f.parameters() if p.requires_grad], lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(steps, 1), eta_min=lr * 0.05)
    g = rng.child("delta").torch()
    f.train()
    for step in range(steps):
        opt.zero_grad()
        loss = internal_prior_loss(f, I_s, c_s, delta_sigma, lambda_sparse, g, step)
        loss.backward()
        opt.step()
        sched.step()
    f.eval()
    return f
