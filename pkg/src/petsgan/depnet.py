"""DEPNet: a small fully convolutional low-res layout generator and its
external-prior adversarial objective."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .imaging import ImageTensor


class TrainingDivergence(FloatingPointError):
    def __init__(self, msg, step=None, last_good=None):
        super().__init__(msg if step is None else f"{msg} (step {step})")
        self.step = step
        self.last_good = last_good


def positional_encoding(h: int, w: int, channels: int) -> torch.Tensor:
    """Sinusoidal encoding of shape [channels, h, w].

    The first half of the channels encodes the row index, the second half the
    column index. Within each half, channel 2k is sin(pos / 10000^(2k/channels))
    and channel 2k+1 the matching cosine.
    """
    if channels % 2:
        raise ValueError(f"positional encoding needs an even channel count, got {channels}")
    half = channels // 2
    k = torch.arange(half) // 2
    freq = 10000.0 ** (-2.0 * k.double() / channels)
    is_cos = (torch.arange(half) % 2).bool()

    def axis(n):
        ang = torch.arange(n, dtype=torch.float64)[None, :] * freq[:, None]
        return torch.where(is_cos[:, None], torch.cos(ang), torch.sin(ang))

    rows = axis(h)[:, :, None].expand(half, h, w)
    cols = axis(w)[:, None, :].expand(half, h, w)
    return torch.cat([rows, cols]).float()


def _block(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), nn.GroupNorm(4, cout), nn.LeakyReLU(0.2))


class DepNetG(nn.Module):
    """Noise (+ positional encoding) -> RGB in [-1, 1], same spatial size as the noise."""

    min_size = 1

    def __init__(self, noise_channels=16, pe_channels=16, width=(32, 64, 64, 64, 32), out_channels=3):
        super().__init__()
        self.noise_channels = noise_channels
        self.pe_channels = pe_channels
        chans = [noise_channels + pe_channels, *width]
        self.body = nn.Sequential(*[_block(a, b) for a, b in zip(chans[:-1], chans[1:])])
        self.head = nn.Conv2d(chans[-1], out_channels, 3, padding=1)

    def forward(self, noise: torch.Tensor) -> torch.Tensor:
        if noise.dim() == 3:
            noise = noise[None]
        b, _, h, w = noise.shape
        x = noise
        if self.pe_channels:
            pe = positional_encoding(h, w, self.pe_channels).to(noise)
            x = torch.cat([noise, pe.expand(b, -1, -1, -1)], dim=1)
        return torch.tanh(self.head(self.body(x)))

    def sample_noise(self, n: int, h: int, w: int, generator: torch.Generator | None = None) -> torch.Tensor:
        return torch.randn(n, self.noise_channels, h, w, generator=generator)


class DepNetD(nn.Module):
    """Image -> one raw logit per sample."""

    def __init__(self, in_channels=3, width=32):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, width * 2, 3, padding=1, stride=2),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width * 2, width * 2, 3, padding=1),
            nn.LeakyReLU(0.2),
        )
        self.fc = nn.Linear(width * 2, 1)

    def forward(self, x):
        f = self.features(x)
        return self.fc(f.mean(dim=(2, 3)))[:, 0]


def generate(g: DepNetG, noise: torch.Tensor, rng=None) -> ImageTensor:
    """Decode a single [noise_channels, h, w] map to a signed ImageTensor."""
    if noise.dim() != 3:
        raise ValueError("expected noise of shape [noise_channels, h, w]")
    if min(noise.shape[1:]) < g.min_size:
        raise ValueError(f"noise spatial dims {tuple(noise.shape[1:])} below minimum {g.min_size}")
    with torch.no_grad():
        return ImageTensor(g(noise[None])[0], "signed")


def nonsaturating_d_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """-log s(D(x)) - log(1 - s(D(G(z)))), averaged."""
    return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()


def nonsaturating_g_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    """-log s(D(G(z))), averaged."""
    return F.softplus(-fake_logits).mean()


def collapse_penalty(logits_1: torch.Tensor, logits_2: torch.Tensor) -> torch.Tensor:
    """-E|D(G(z1)) - D(G(z2))| on raw logits; never positive."""
    return -(logits_1 - logits_2).abs().mean()


def external_prior_objective(real_logits, fake_logits, logits_1, logits_2) -> torch.Tensor:
    """Value of E[log s(D(x)) - log s(D(G(z)))] - E|D(G(z1)) - D(G(z2))|."""
    return (F.logsigmoid(real_logits).mean() - F.logsigmoid(fake_logits).mean()) + collapse_penalty(logits_1, logits_2)


def _finite(t, name, step):
    if not torch.isfinite(t):
        raise TrainingDivergence(f"non-finite {name}", step)
    return t


def external_prior_loss(g, d, real_batch, z_batch, z1, z2, lambda_div: float = 1.0, step=None):
    """Return (loss_g, loss_d) for one external-prior update.

    loss_d trains D_G to separate prior samples from G(z); loss_g is the
    non-saturating generator loss plus lambda_div times the collapse penalty
    (set lambda_div=0 to drop the diversity term).
    """
    fake = g(z_batch)
    loss_d = nonsaturating_d_loss(d(real_batch), d(fake.detach()))
    loss_g = nonsaturating_g_loss(d(fake))
    if lambda_div:
        loss_g = loss_g + lambda_div * collapse_penalty(d(g(z1)), d(g(z2)))
    return _finite(loss_g, "external prior G loss", step), _finite(loss_d, "external prior D loss", step)


def mean_pairwise_distance(x: torch.Tensor) -> float:
    """Mean L2 distance over unordered pairs of a batch."""
    flat = x.flatten(1).double()
    n = flat.shape[0]
    d = torch.cdist(flat, flat)
    return (d.sum() / (n * (n - 1))).item() if n > 1 else math.nan
