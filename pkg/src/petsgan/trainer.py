"""Joint training of DEPNet, DIPNet and the patch discriminator, plus
checkpointing and sampling."""

from __future__ import annotations

import copy
import dataclasses
import io
import json
import logging
import math
import tarfile
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .depnet import DepNetD, DepNetG, TrainingDivergence, external_prior_loss
from .dipnet import DIPNet, internal_prior_loss
from .external_prior import SyntheticProvider
from .imaging import ImageTensor, Rng, load_image, preprocess
from .patch_disc import MultiScaleD, patch_adv_loss

log = logging.getLogger(__name__)

CKPT_VERSION = "petsgan-ckpt-1"
ABLATIONS = ("full", "cascaded", "no_patch_adv", "no_external", "no_internal")

# Table 1 ablation rows -> ablation mode
ABLATION_ROWS = {
    "cascaded": "cascaded",
    "w/o rho_tau": "no_patch_adv",
    "w/o varphi": "no_external",
    "w/o phi": "no_internal",
}


@dataclass
class RunConfig:
    """Every training knob. Values the method leaves open are repo choices."""

    epochs: int = 5000
    batch_adv: int = 1
    batch_prior: int = 32
    lr_G: float = 5e-4
    lr_F: float = 5e-4
    lr_D: float = 1e-4
    lr_DG: float = 1e-4
    warmup_epochs: int | None = None  # None -> 10% of epochs
    lambda_ext: float = 1.0
    lambda_int: float = 1.0
    lambda_div: float = 1.0
    lambda_sparse: float = 0.01
    sigma_z: float = 0.5
    delta_sigma: float = 0.1
    temperature: float = 0.07
    s: int = 7
    s_star: int | None = None  # patch-transfer window on the low-res image; None -> s
    down_factor: int = 8
    max_side: int = 256
    ablation: str = "full"
    seed: int = 0
    noise_channels: int = 16
    pe_channels: int = 16
    embed_width: int = 32
    ir_width: int = 32
    ir_blocks: int = 8
    d_width: int = 32
    dg_width: int = 32
    augmentations: str = "crop,flip,jitter,affine"
    int_steps: int = 1
    ckpt_every: int = 25

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        for name in ("batch_adv", "batch_prior", "down_factor", "max_side", "s", "int_steps", "ckpt_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        for name in ("lr_G", "lr_F", "lr_D", "lr_DG", "temperature"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("lambda_ext", "lambda_int", "lambda_div", "lambda_sparse", "sigma_z", "delta_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def warmup(self) -> int:
        return self.epochs // 10 if self.warmup_epochs is None else self.warmup_epochs

    @property
    def pt_window(self) -> int:
        return self.s if self.s_star is None else self.s_star

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "paper": {},
    # 64x64 exemplar, 8x8 code; the patch-transfer window shrinks to fit the 8x8 code.
    # With only 36 key patches, a stronger sparsity weight is needed for sharp attention.
    "desk": {"max_side": 64, "epochs": 500, "s_star": 3, "lambda_sparse": 0.2},
}


def preset(name: str, **overrides) -> RunConfig:
    return RunConfig(**{**PRESETS[name], **overrides})


@dataclass
class ModelBundle:
    G: DepNetG
    F: DIPNet
    D: MultiScaleD
    D_G: DepNetD

    def named(self):
        return {"G": self.G, "F": self.F, "D": self.D, "D_G": self.D_G}

    def eval(self):
        for m in self.named().values():
            m.eval()
        return self


def build_models(cfg: RunConfig, c_I: torch.Tensor) -> ModelBundle:
    torch.manual_seed(Rng(cfg.seed, "init").derived_seed)
    G = DepNetG(cfg.noise_channels, cfg.pe_channels)
    Fnet = DIPNet(c_I, s=cfg.pt_window, scale=cfg.down_factor, temperature=cfg.temperature,
                  embed_width=cfg.embed_width, ir_width=cfg.ir_width, ir_blocks=cfg.ir_blocks,
                  seed=Rng(cfg.seed, "embedder").derived_seed % (2**31))
    D = MultiScaleD(width=cfg.d_width)
    D_G = DepNetD(width=cfg.dg_width)
    return ModelBundle(G, Fnet, D, D_G)


@dataclass
class Checkpoint:
    config: RunConfig
    models: ModelBundle
    I: torch.Tensor  # signed [C, H, W]
    c_I: torch.Tensor  # signed [C, h, w]
    epoch: int = 0
    optim: dict = field(default_factory=dict)  # name -> optimizer state_dict
    rng_states: dict = field(default_factory=dict)  # name -> uint8 tensor
    counters: dict = field(default_factory=dict)
    version: str = CKPT_VERSION


class CheckpointError(IOError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ProviderError(RuntimeError):
    pass


def _make_optimizers(cfg: RunConfig, m: ModelBundle) -> dict:
    def adam(module, lr):
        params = [p for p in module.parameters() if p.requires_grad]
        return torch.optim.Adam(params, lr=lr, betas=(0.5, 0.999))

    return {"G": adam(m.G, cfg.lr_G), "F": adam(m.F, cfg.lr_F), "D": adam(m.D, cfg.lr_D), "D_G": adam(m.D_G, cfg.lr_DG)}


def _params(*modules):
    return [p for mod in modules for p in mod.parameters() if p.requires_grad]


def _sample_prior(provider, n, g, retries=3):
    last = None
    for _ in range(retries):
        try:
            return provider.sample_batch(n, g)
        except Exception as exc:  # noqa: BLE001 - any provider failure is retried
            last = exc
            log.warning("prior provider failed: %s", exc)
    raise ProviderError(f"prior provider failed {retries} times: {last}") from last


def _phases(cfg: RunConfig, epoch: int) -> tuple[bool, bool, bool, bool]:
    """(external step, internal step, adversarial step, G receives adversarial grads)."""
    ab = cfg.ablation
    if ab == "cascaded":
        split = cfg.epochs // 2
        first = epoch < split
        return first, not first, (not first) and epoch >= max(split, cfg.warmup), False
    ext = ab != "no_external"
    internal = ab != "no_internal"
    adv = ab != "no_patch_adv" and epoch >= cfg.warmup
    return ext, internal, adv, True


def _snapshot(ckpt: Checkpoint) -> Checkpoint:
    return copy.deepcopy(ckpt)


def _resolve_image(image, cfg):
    if isinstance(image, (str, Path)):
        image = load_image(image)
    return preprocess(image, cfg.max_side, cfg.down_factor)


def init_checkpoint(image, cfg: RunConfig) -> Checkpoint:
    I, c_I = _resolve_image(image, cfg)
    I_s, c_s = I.to_signed().data, c_I.to_signed().data
    models = build_models(cfg, c_s)
    gens = {name: Rng(cfg.seed, name).torch() for name in ("noise", "prior", "delta")}
    return Checkpoint(cfg, models, I_s, c_s, 0, {}, {k: g.get_state() for k, g in gens.items()},
                      {"g_steps": 0, "f_steps": 0, "d_steps": 0, "dg_steps": 0})


def train(image, cfg: RunConfig, provider=None, metrics_path=None, resume: Checkpoint | None = None,
          callback=None) -> tuple[Checkpoint, list[dict]]:
    """Run (or continue) joint training. Returns the final checkpoint and per-epoch metrics."""
    ckpt = resume if resume is not None else init_checkpoint(image, cfg)
    cfg = ckpt.config
    m = ckpt.models
    I = ckpt.I[None]
    c_I = ckpt.c_I[None]
    h, w = c_I.shape[-2:]
    if provider is None:
        aug = [a for a in cfg.augmentations.split(",") if a]
        provider = SyntheticProvider(ImageTensor(ckpt.I, "signed").to_unit(), (h, w), aug)
    opts = _make_optimizers(cfg, m)
    for name, st in ckpt.optim.items():
        opts[name].load_state_dict(st)
    gens = {}
    for name, st in ckpt.rng_states.items():
        gens[name] = torch.Generator()
        gens[name].set_state(st)
    counters = dict(ckpt.counters)

    metrics = []
    out = open(metrics_path, "a") if metrics_path else None
    last_good = _snapshot(ckpt)
    t0 = time.perf_counter()
    for p in m.named().values():
        p.train()
    try:
        for epoch in range(ckpt.epoch, cfg.epochs):
            do_ext, do_int, do_adv, g_adv = _phases(cfg, epoch)
            rec = {"epoch": epoch, "loss_adv": 0.0, "loss_adv_d": 0.0, "loss_ext": 0.0, "loss_ext_d": 0.0, "loss_int": 0.0}
            try:
                if do_ext:
                    real = _sample_prior(provider, cfg.batch_prior, gens["prior"])
                    nz = m.G.sample_noise(cfg.batch_prior, h, w, gens["noise"])
                    half = max(1, cfg.batch_prior // 2)
                    z1 = m.G.sample_noise(half, h, w, gens["noise"])
                    z2 = m.G.sample_noise(half, h, w, gens["noise"])
                    opts["G"].zero_grad(set_to_none=True)
                    opts["D_G"].zero_grad(set_to_none=True)
                    lg, ld = external_prior_loss(m.G, m.D_G, real, nz, z1, z2, cfg.lambda_div, epoch)
                    ld.backward(inputs=_params(m.D_G))
                    (cfg.lambda_ext * lg).backward(inputs=_params(m.G))
                    opts["D_G"].step()
                    opts["G"].step()
                    counters["dg_steps"] += 1
                    counters["g_steps"] += 1
                    rec["loss_ext"], rec["loss_ext_d"] = lg.item(), ld.item()
                if do_int:
                    total = 0.0
                    for _ in range(cfg.int_steps):
                        opts["F"].zero_grad(set_to_none=True)
                        li, parts = internal_prior_loss(m.F, I, c_I, cfg.delta_sigma, cfg.lambda_sparse,
                                                        gens["delta"], epoch, return_parts=True)
                        (cfg.lambda_int * li).backward(inputs=_params(m.F))
                        opts["F"].step()
                        counters["f_steps"] += 1
                        total += li.item()
                    rec["loss_int"] = total / cfg.int_steps
                    rec["mean_top"] = parts["mean_top"]
                if do_adv:
                    nz = m.G.sample_noise(cfg.batch_adv, h, w, gens["noise"])
                    fake, _ = m.F(m.G(nz))
                    lg, ld = patch_adv_loss(m.D, I.expand(cfg.batch_adv, -1, -1, -1), fake, epoch)
                    for k in ("D", "G", "F"):
                        opts[k].zero_grad(set_to_none=True)
                    ld.backward(inputs=_params(m.D))
                    lg.backward(inputs=_params(m.G, m.F) if g_adv else _params(m.F))
                    opts["D"].step()
                    opts["F"].step()
                    counters["d_steps"] += 1
                    counters["f_steps"] += 1
                    if g_adv:
                        opts["G"].step()
                        counters["g_steps"] += 1
                    rec["loss_adv"], rec["loss_adv_d"] = lg.item(), ld.item()
            except TrainingDivergence as exc:
                raise TrainingDivergence(str(exc), epoch, last_good) from exc
            rec["loss_total"] = rec["loss_adv"] + cfg.lambda_ext * rec["loss_ext"] + cfg.lambda_int * rec["loss_int"]
            rec.update(counters)
            rec["wallclock_s"] = time.perf_counter() - t0
            if not all(math.isfinite(v) for v in rec.values() if isinstance(v, float)):
                raise TrainingDivergence("non-finite metrics", epoch, last_good)
            metrics.append(rec)
            if out:
                out.write(json.dumps(rec) + "\n")
            if callback:
                callback(rec)
            ckpt.epoch = epoch + 1
            ckpt.counters = dict(counters)
            if ckpt.epoch % cfg.ckpt_every == 0:
                _store_state(ckpt, opts, gens)
                last_good = _snapshot(ckpt)
    finally:
        if out:
            out.close()
    _store_state(ckpt, opts, gens)
    m.eval()
    return ckpt, metrics


def _store_state(ckpt, opts, gens):
    ckpt.optim = {k: copy.deepcopy(o.state_dict()) for k, o in opts.items()}
    ckpt.rng_states = {k: g.get_state() for k, g in gens.items()}


def noise_dims(ckpt: Checkpoint, out_h: int, out_w: int) -> tuple[int, int]:
    df = ckpt.config.down_factor
    nh, nw = math.ceil(out_h / df), math.ceil(out_w / df)
    if nh * df != out_h or nw * df != out_w:
        warnings.warn(f"output size {out_h}x{out_w} rounded up to {nh * df}x{nw * df}", stacklevel=3)
    return nh, nw


@torch.no_grad()
def generate_samples(ckpt: Checkpoint, n: int, out_h: int | None = None, out_w: int | None = None,
                     rng: Rng = Rng(0, "generate"), hard: bool = False, return_low: bool = False):
    """n syntheses F(G(z)) of size (out_h, out_w) as unit-range ImageTensors."""
    out_h = out_h or ckpt.I.shape[-2]
    out_w = out_w or ckpt.I.shape[-1]
    nh, nw = noise_dims(ckpt, out_h, out_w)
    m = ckpt.models.eval()
    g = rng.torch()
    imgs, lows = [], []
    for _ in range(n):
        low = m.G(m.G.sample_noise(1, nh, nw, g))
        hi, _ = m.F(low, hard=hard)
        imgs.append(ImageTensor.from_signed(hi[0]))
        lows.append(ImageTensor.from_signed(low[0]))
    return (imgs, lows) if return_low else imgs


# ---- checkpoint archive -------------------------------------------------

_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.uint8: "u1", torch.int64: "<i8"}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


class _Blobs:
    def __init__(self):
        self.files: dict[str, bytes] = {}

    def put(self, name: str, t: torch.Tensor) -> dict:
        t = t.detach().cpu().contiguous()
        arr = t.numpy().astype(_DTYPES[t.dtype], copy=False)
        fname = f"blobs/{len(self.files):05d}.bin"
        self.files[fname] = arr.tobytes()
        return {"name": name, "file": fname, "shape": list(t.shape), "dtype": _DTYPES[t.dtype]}


def _get(tar: tarfile.TarFile, ref: dict) -> torch.Tensor:
    f = tar.extractfile(ref["file"])
    if f is None:
        raise CheckpointError(f"missing blob {ref['file']}")
    raw = f.read()
    arr = np.frombuffer(raw, dtype=ref["dtype"])
    if arr.size != math.prod(ref["shape"]):
        raise CheckpointError(f"blob {ref['file']} has wrong size")
    return torch.from_numpy(arr.copy()).reshape(ref["shape"]).to(_TORCH_DTYPES[ref["dtype"]])


def _encode_optim(state_dict: dict, blobs: _Blobs, prefix: str) -> dict:
    state = {}
    for idx, st in state_dict["state"].items():
        entry = {}
        for k, v in st.items():
            entry[k] = {"tensor": blobs.put(f"{prefix}.{idx}.{k}", v)} if torch.is_tensor(v) else {"value": v}
        state[str(idx)] = entry
    return {"param_groups": state_dict["param_groups"], "state": state}


def _decode_optim(d: dict, tar) -> dict:
    state = {}
    for idx, entry in d["state"].items():
        state[int(idx)] = {k: _get(tar, v["tensor"]) if "tensor" in v else v["value"] for k, v in entry.items()}
    return {"param_groups": d["param_groups"], "state": state}


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write a tar archive: manifest.json plus raw little-endian tensor blobs."""
    blobs = _Blobs()
    tensors = {}
    for mname, module in ckpt.models.named().items():
        tensors[mname] = [blobs.put(k, v) for k, v in module.state_dict().items()]
    manifest = {
        "version": ckpt.version,
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "counters": ckpt.counters,
        "tensors": tensors,
        "images": {"I": blobs.put("I", ckpt.I), "c_I": blobs.put("c_I", ckpt.c_I)},
        "optim": {k: _encode_optim(v, blobs, k) for k, v in ckpt.optim.items()},
        "rng": {k: blobs.put(k, v) for k, v in ckpt.rng_states.items()},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with tarfile.open(path, "w") as tar:
        entries = {"manifest.json": json.dumps(manifest, indent=1).encode(), **blobs.files}
        for name, data in entries.items():
            info = tarfile.TarInfo(name)
            info.size = len(data)
            info.mtime = 0
            tar.addfile(info, io.BytesIO(data))
    return path


def load_checkpoint(path) -> Checkpoint:
    try:
        with tarfile.open(path, "r") as tar:
            f = tar.extractfile("manifest.json")
            if f is None:
                raise CheckpointError("manifest missing")
            manifest = json.loads(f.read().decode())
            version = manifest.get("version")
            if version != CKPT_VERSION:
                raise CheckpointVersionError(f"checkpoint version {version!r} is not supported (expected {CKPT_VERSION!r})")
            cfg = RunConfig.from_dict(manifest["config"])
            c_I = _get(tar, manifest["images"]["c_I"])
            I = _get(tar, manifest["images"]["I"])
            models = build_models(cfg, c_I)
            for mname, module in models.named().items():
                sd = {ref["name"]: _get(tar, ref) for ref in manifest["tensors"][mname]}
                module.load_state_dict(sd)
            optim = {k: _decode_optim(v, tar) for k, v in manifest["optim"].items()}
            rng = {k: _get(tar, v) for k, v in manifest["rng"].items()}
    except CheckpointError:
        raise
    except (tarfile.TarError, EOFError, KeyError, ValueError, json.JSONDecodeError, RuntimeError) as exc:
        raise CheckpointError(f"corrupt checkpoint archive {path}: {exc}") from exc
    models.eval()
    return Checkpoint(cfg, models, I, c_I, manifest["epoch"], optim, rng, manifest["counters"], version)
