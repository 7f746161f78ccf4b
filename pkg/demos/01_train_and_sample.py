"""Train on one small texture, then sample it at a few output sizes.

    python demos/01_train_and_sample.py [--epochs 500] [--out demo_out]

With the default 500 epochs this takes a few minutes on one CPU core.
"""

import argparse
from pathlib import Path

from petsgan import Rng, generate_samples, preset, save_checkpoint, save_image, train
from petsgan.eval_apps import noise_patch_score, patch_score
from petsgan.imaging import ImageTensor

HERE = Path(__file__).resolve().parent
IMAGE = HERE.parent / "tests" / "data" / "brick_64.png"

ap = argparse.ArgumentParser()
ap.add_argument("--epochs", type=int, default=500)
ap.add_argument("--out", default="demo_out")
args = ap.parse_args()
out = Path(args.out)
out.mkdir(parents=True, exist_ok=True)

# The desk preset keeps everything at 64x64 with an 8x8 code for the low-res generator.
cfg = preset("desk", epochs=args.epochs)
ckpt, metrics = train(IMAGE, cfg, metrics_path=out / "metrics.jsonl")
print(f"trained {len(metrics)} epochs, last total loss {metrics[-1]['loss_total']:.4f}")
save_checkpoint(ckpt, out / "brick.pkc")

# G is fully convolutional, so the same weights give larger or non-square canvases.
for h, w in [(64, 64), (64, 96), (128, 128)]:
    for i, img in enumerate(generate_samples(ckpt, 2, h, w, rng=Rng(0, "demo"))):
        save_image(img, out / f"sample_{h}x{w}_{i}.png")

# How close the syntheses are to the exemplar's 7x7 patches, relative to uniform noise.
I = ImageTensor.from_signed(ckpt.I)
ratio = patch_score(I, generate_samples(ckpt, 8)) / noise_patch_score(I)
print(f"patch distance vs noise baseline: {ratio:.3f}")
