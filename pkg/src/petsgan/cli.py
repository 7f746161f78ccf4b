"""Command-line entry point: train, generate, invert, eval, verify-prop1,
upscale and manipulate.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every command
writes a resolved-config JSON next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import difflib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import eval_apps, trainer
from .external_prior import DirectoryProvider, LatentCode, invert, perturb_and_sample
from .imaging import ImageTensor, Rng, load_image, preprocess, save_image

log = logging.getLogger("petsgan")

COMMANDS = ("train", "generate", "invert", "eval", "verify-prop1", "upscale", "manipulate")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise UsageError(message)


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _parse_bool(v: str) -> bool:
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {v}")


def _field_type(f: dataclasses.Field):
    t = str(f.type)
    if "int" in t and "None" in t:
        return lambda v: None if v.lower() == "none" else int(v)
    return {"int": int, "float": float, "str": str, "bool": _parse_bool}.get(t, str)


def _add_run_config_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("run config (defaults < --preset < --config < flags)")
    for f in dataclasses.fields(trainer.RunConfig):
        g.add_argument(_flag(f.name), dest=f"cfg_{f.name}", type=_field_type(f), default=argparse.SUPPRESS,
                       metavar=f.name.upper())
    g.add_argument("--preset", choices=sorted(trainer.PRESETS), default=None)
    g.add_argument("--config", type=Path, default=None, help="flat JSON file of RunConfig keys")


def resolve_config(args) -> trainer.RunConfig:
    d = dict(trainer.PRESETS[args.preset]) if getattr(args, "preset", None) else {}
    if getattr(args, "config", None):
        data = json.loads(Path(args.config).read_text())
        if not isinstance(data, dict) or any(isinstance(v, (dict, list)) for v in data.values()):
            raise UsageError("config file must be a flat JSON object")
        d.update(data)
    d.update({k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_")})
    try:
        return trainer.RunConfig.from_dict({**trainer.RunConfig().to_dict(), **d})
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must be HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("size must be positive")
    return h, w


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="petsgan", description="Single-image generation with external and internal priors.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model on one image")
    t.add_argument("--image", type=Path, required=True)
    t.add_argument("--out", type=Path, default=None, help="output dir (default runs/<timestamp>-<seed>)")
    t.add_argument("--prior-dir", type=Path, default=None, help="directory of pre-generated prior images")
    t.add_argument("--samples", type=int, default=8, help="syntheses to save after training")
    _add_run_config_flags(t)

    g = sub.add_parser("generate", help="sample images from a checkpoint")
    g.add_argument("--ckpt", type=Path, required=True)
    g.add_argument("--n", type=int, default=9)
    g.add_argument("--size", type=_parse_size, default=None, help="HxW, default exemplar size")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--hard", action="store_true", help="hard patch transfer at inference")
    g.add_argument("--out", type=Path, default=None)

    i = sub.add_parser("invert", help="invert an image through a served generator and dump prior samples")
    i.add_argument("--image", type=Path, required=True)
    i.add_argument("--generator", required=True, help="generator service address host:port or unix:path")
    i.add_argument("--steps", type=int, default=500)
    i.add_argument("--sigma", type=float, default=0.5)
    i.add_argument("--n", type=int, default=64, help="perturbed samples to write")
    i.add_argument("--max-side", type=int, default=256)
    i.add_argument("--down-factor", type=int, default=8)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out", type=Path, default=None)

    e = sub.add_parser("eval", help="train and evaluate on every image of a directory (or one checkpoint)")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--images", type=Path, help="directory with one image per file")
    src.add_argument("--ckpt", type=Path)
    e.add_argument("--n", type=int, default=8)
    e.add_argument("--out", type=Path, default=None)
    _add_run_config_flags(e)

    v = sub.add_parser("verify-prop1", help="check that patch transfer moves restorations toward the exemplar")
    v.add_argument("--image", type=Path, required=True)
    v.add_argument("--samples", type=int, default=20)
    v.add_argument("--steps", type=int, default=1500)
    v.add_argument("--max-side", type=int, default=64)
    v.add_argument("--s", type=int, default=7)
    v.add_argument("--s-star", type=int, default=3)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", type=Path, default=None)

    u = sub.add_parser("upscale", help="train a plug-in high-res restoration net")
    u.add_argument("--ckpt", type=Path, required=True)
    u.add_argument("--image-hi", type=Path, required=True)
    u.add_argument("--factor", type=int, default=4)
    u.add_argument("--steps", type=int, default=600)
    u.add_argument("--n", type=int, default=4)
    u.add_argument("--seed", type=int, default=0)
    u.add_argument("--out", type=Path, default=None)

    m = sub.add_parser("manipulate", help="harmonize / style-transfer / edit / paint2image")
    m.add_argument("--task", choices=eval_apps.TASKS, required=True)
    m.add_argument("--content", type=Path, required=True)
    m.add_argument("--image", type=Path, required=True)
    m.add_argument("--steps", type=int, default=1500)
    m.add_argument("--max-side", type=int, default=256)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", type=Path, default=None)
    return p


def _all_flags(parser: argparse.ArgumentParser) -> list[str]:
    flags = []
    for action in parser._actions:
        flags += [o for o in action.option_strings if o.startswith("--")]
        if isinstance(action, argparse._SubParsersAction):
            for sp in action.choices.values():
                flags += _all_flags(sp)
    return sorted(set(flags))


def _suggest(parser, argv, message) -> str:
    words = [a.split("=")[0] for a in argv if a.startswith("--")]
    known = _all_flags(parser)
    for w in words:
        if w not in known:
            close = difflib.get_close_matches(w, known, n=1)
            if close:
                return f"{message} (did you mean {close[0]}?)"
    for w in argv:
        if not w.startswith("-") and w not in COMMANDS:
            close = difflib.get_close_matches(w, COMMANDS, n=1)
            if close and "invalid choice" in message:
                return f"{message} (did you mean {close[0]}?)"
            break
    return message


def _run_dir(out: Path | None, seed: int) -> Path:
    if out is None:
        root = Path(os.environ.get("PETSGAN_RUNS_DIR", "runs"))
        out = root / f"{time.strftime('%Y%m%d-%H%M%S')}-{seed}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(out: Path, payload: dict) -> None:
    (out / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True, default=str))


def _cmd_train(args) -> dict:
    cfg = resolve_config(args)
    out = _run_dir(args.out, cfg.seed)
    _write_config(out, cfg.to_dict())
    provider = None
    if args.prior_dir is not None:
        _, c_I = preprocess(load_image(args.image), cfg.max_side, cfg.down_factor)
        provider = DirectoryProvider(args.prior_dir, c_I.dims)
    ckpt_path = out / "checkpoint.pkc"

    def save_periodic(rec):
        if rec["epoch"] and rec["epoch"] % cfg.ckpt_every == 0:
            log.info("epoch %d: loss_total %.4f", rec["epoch"], rec["loss_total"])

    ckpt, metrics = trainer.train(args.image, cfg, provider=provider, metrics_path=out / "metrics.jsonl",
                                  callback=save_periodic)
    trainer.save_checkpoint(ckpt, ckpt_path)
    samples_dir = out / "samples"
    samples_dir.mkdir(exist_ok=True)
    for k, img in enumerate(trainer.generate_samples(ckpt, args.samples, rng=Rng(cfg.seed, "generate"))):
        save_image(img, samples_dir / f"sample_{k:03d}.png")
    return {"out": str(out), "checkpoint": str(ckpt_path), "epochs": ckpt.epoch}


def _cmd_generate(args) -> dict:
    ckpt = trainer.load_checkpoint(args.ckpt)
    out = _run_dir(args.out, args.seed)
    h, w = args.size if args.size else (None, None)
    _write_config(out, {"ckpt": str(args.ckpt), "n": args.n, "size": args.size, "seed": args.seed, "hard": args.hard})
    imgs = trainer.generate_samples(ckpt, args.n, h, w, rng=Rng(args.seed, "generate"), hard=args.hard)
    for k, img in enumerate(imgs):
        save_image(img, out / f"sample_{k:03d}.png")
    return {"out": str(out), "n": len(imgs), "dims": list(imgs[0].dims) if imgs else None}


def _cmd_invert(args) -> dict:
    from .generator_service import GeneratorClient

    out = _run_dir(args.out, args.seed)
    _write_config(out, {k: str(v) if isinstance(v, Path) else v for k, v in vars(args).items()})
    I, c_I = preprocess(load_image(args.image), args.max_side, args.down_factor)
    with GeneratorClient(args.generator) as gen:
        target = I.to_signed().data
        if tuple(gen.out_shape[-2:]) != tuple(target.shape[-2:]):
            from .imaging import resize_tensor

            target = resize_tensor(target, gen.out_shape[-2], gen.out_shape[-1], "bicubic")
        code = invert(gen, target, steps=args.steps, rng=Rng(args.seed, "invert"))
        np.save(out / "latent.npy", code.z.detach().cpu().numpy())
        prior_dir = out / "prior"
        prior_dir.mkdir(exist_ok=True)
        samples = perturb_and_sample(gen, LatentCode(code.z.detach()), args.sigma, args.n, Rng(args.seed, "perturb"), c_I.dims)
        for k, img in enumerate(samples):
            save_image(img.to_unit(), prior_dir / f"prior_{k:04d}.png")
    return {"out": str(out), "prior_dir": str(prior_dir), "final_loss": code.meta.get("final_loss")}


def _eval_one(image: Path, cfg, n: int) -> eval_apps.EvalReport:
    t0 = time.perf_counter()
    ckpt, _ = trainer.train(image, cfg)
    secs = time.perf_counter() - t0
    samples = trainer.generate_samples(ckpt, n, rng=Rng(cfg.seed, "generate"))
    return eval_apps.evaluate(ImageTensor.from_signed(ckpt.I), samples, secs)


def _cmd_eval(args) -> dict:
    cfg = resolve_config(args)
    out = _run_dir(args.out, cfg.seed)
    _write_config(out, {**cfg.to_dict(), "n": args.n})
    if args.ckpt is not None:
        ckpt = trainer.load_checkpoint(args.ckpt)
        samples = trainer.generate_samples(ckpt, args.n, rng=Rng(cfg.seed, "generate"))
        rep = eval_apps.evaluate(ImageTensor.from_signed(ckpt.I), samples)
        (out / "report.json").write_text(rep.to_json())
        return {"out": str(out), **json.loads(rep.to_json())}
    images = sorted(p for p in args.images.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not images:
        raise UsageError(f"no images in {args.images}")
    rows = []
    for p in images:
        rep = _eval_one(p, cfg, args.n)
        (out / f"{p.stem}.json").write_text(rep.to_json())
        rows.append({"image": p.name, "sifid": rep.sifid, "diversity": rep.diversity,
                     "patch_dist": rep.patch_dist, "train_seconds": rep.train_seconds, "n_samples": rep.n_samples})
    with open(out / "aggregate.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0]))
        wr.writeheader()
        wr.writerows(rows)
        wr.writerow({"image": "mean", **{k: float(np.mean([r[k] for r in rows])) for k in list(rows[0])[1:]}})
    return {"out": str(out), "images": len(rows)}


def _cmd_verify(args) -> dict:
    out = _run_dir(args.out, args.seed)
    _write_config(out, {k: str(v) if isinstance(v, Path) else v for k, v in vars(args).items()})
    rep = eval_apps.run_prop1(load_image(args.image), args.samples, args.steps, args.max_side, 8, args.s, args.s_star, args.seed)
    (out / "prop1.json").write_text(json.dumps(rep.to_dict(), indent=2))
    return {"out": str(out), "holds": rep.holds, "dist_direct": rep.dist_direct, "dist_matched": rep.dist_matched}


def _cmd_upscale(args) -> dict:
    ckpt = trainer.load_checkpoint(args.ckpt)
    out = _run_dir(args.out, args.seed)
    _write_config(out, {k: str(v) if isinstance(v, Path) else v for k, v in vars(args).items()})
    res = eval_apps.hires_upscale(ckpt, load_image(args.image_hi), args.factor, steps=args.steps,
                                  n_samples=args.n, rng=Rng(args.seed, "hires"))
    for k, img in enumerate(res.syntheses):
        save_image(img, out / f"hires_{k:03d}.png")
    torch.save(res.ir.state_dict(), out / "irnet.pt")
    return {"out": str(out), "psnr": res.psnr, "seconds": res.seconds}


def _cmd_manipulate(args) -> dict:
    out = _run_dir(args.out, args.seed)
    _write_config(out, {k: str(v) if isinstance(v, Path) else v for k, v in vars(args).items()})
    I, _ = preprocess(load_image(args.image), args.max_side, 8)
    content = load_image(args.content)
    res = eval_apps.manipulate(args.task, content, I, steps=args.steps, rng=Rng(args.seed, "manipulate"))
    save_image(res, out / f"{args.task}.png")
    return {"out": str(out), "dims": list(res.dims)}


HANDLERS = {
    "train": _cmd_train,
    "generate": _cmd_generate,
    "invert": _cmd_invert,
    "eval": _cmd_eval,
    "verify-prop1": _cmd_verify,
    "upscale": _cmd_upscale,
    "manipulate": _cmd_manipulate,
}


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"petsgan: error: {_suggest(parser, argv, str(exc))}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        result = HANDLERS[args.command](args)
    except UsageError as exc:
        print(f"petsgan: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime failure
        log.debug("failure", exc_info=True)
        print(f"petsgan: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, default=str))
    return 0


def main() -> None:
    sys.exit(run())
