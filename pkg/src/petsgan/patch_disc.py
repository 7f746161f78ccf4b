"""Multi-scale dilated patch discriminator and the patch adversarial loss."""

from __future__ import annotations

import torch
import torch.nn as nn

from .depnet import TrainingDivergence, nonsaturating_d_loss, nonsaturating_g_loss


def receptive_field(layers) -> int:
    """Effective receptive field of stacked convs given (kernel, dilation, stride) triples."""
    rf, jump = 1, 1
    for k, dil, stride in layers:
        rf += (k - 1) * dil * jump
        jump *= stride
    return rf


class Branch(nn.Module):
    def __init__(self, in_channels, width, dilation, n_layers, padding_mode):
        super().__init__()
        layers = []
        chans = [in_channels] + [width] * (n_layers - 1)
        for cin, cout in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(cin, cout, 3, padding=dilation, dilation=dilation, padding_mode=padding_mode), nn.LeakyReLU(0.2)]
        layers.append(nn.Conv2d(chans[-1], 1, 3, padding=dilation, dilation=dilation, padding_mode=padding_mode))
        self.net = nn.Sequential(*layers)
        self.dilation = dilation

    def forward(self, x):
        return self.net(x)

    def conv_layers(self):
        return [(m.kernel_size[0], m.dilation[0], m.stride[0]) for m in self.net if isinstance(m, nn.Conv2d)]


class MultiScaleD(nn.Module):
    """Parallel dilated-conv branches, each producing a patch logit map."""

    def __init__(self, in_channels=3, width=32, dilations=(1, 2, 4), n_layers=4, padding_mode="zeros"):
        super().__init__()
        self.branches = nn.ModuleList(Branch(in_channels, width, d, n_layers, padding_mode) for d in dilations)

    def forward(self, x) -> list[torch.Tensor]:
        return [b(x) for b in self.branches]


def receptive_fields(d: MultiScaleD) -> list[tuple[int, int]]:
    return [(i, receptive_field(b.conv_layers())) for i, b in enumerate(d.branches)]


def adv_losses_from_logits(real_maps, fake_maps):
    """Non-saturating (loss_g, loss_d), averaged over logits then over branches."""
    n = len(fake_maps)
    loss_d = sum(nonsaturating_d_loss(r, f) for r, f in zip(real_maps, fake_maps)) / n
    loss_g = sum(nonsaturating_g_loss(f) for f in fake_maps) / n
    return loss_g, loss_d


def patch_adv_loss(d: MultiScaleD, real_img: torch.Tensor, fake_img: torch.Tensor, step=None):
    """Return (loss_g, loss_d). loss_d sees a detached fake; no gradient penalty."""
    if real_img.shape[-2:] != fake_img.shape[-2:]:
        raise ValueError("real and fake images must share dims")
    real_maps = d(real_img)
    loss_d = sum(nonsaturating_d_loss(r, f) for r, f in zip(real_maps, d(fake_img.detach()))) / len(real_maps)
    fake_maps = d(fake_img)
    loss_g = sum(nonsaturating_g_loss(f) for f in fake_maps) / len(fake_maps)
    for name, v in (("patch adversarial G loss", loss_g), ("patch adversarial D loss", loss_d)):
        if not torch.isfinite(v):
            raise TrainingDivergence(f"non-finite {name}", step)
    return loss_g, loss_d
