import math

import pytest
import torch

from petsgan.depnet import TrainingDivergence
from petsgan.external_prior import PriorProvider
from petsgan.trainer import (
    ABLATION_ROWS,
    ABLATIONS,
    CheckpointError,
    CheckpointVersionError,
    ProviderError,
    RunConfig,
    generate_samples,
    init_checkpoint,
    load_checkpoint,
    preset,
    save_checkpoint,
    train,
)
from petsgan.imaging import Rng

BRICK = "tests/data/brick_64.png"


def tiny(**kw):
    base = dict(epochs=6, warmup_epochs=2, batch_prior=4, ir_blocks=1, ir_width=8, embed_width=8,
                d_width=8, dg_width=8, ckpt_every=2)
    return preset("desk", **{**base, **kw})


def test_config_validation_and_roundtrip():
    cfg = tiny()
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    assert RunConfig(epochs=100).warmup == 10
    for bad in [dict(ablation="nope"), dict(lr_G=0.0), dict(batch_prior=0), dict(epochs=-1), dict(sigma_z=-1)]:
        with pytest.raises(ValueError):
            RunConfig(**bad)
    with pytest.raises(ValueError):
        RunConfig.from_dict({"bogus": 1})


def test_ablation_rows_map_one_to_one():
    assert sorted(ABLATION_ROWS.values()) == sorted(set(ABLATION_ROWS.values()))
    assert set(ABLATION_ROWS.values()) == set(ABLATIONS) - {"full"}


def test_zero_epochs_returns_initial_state():
    cfg = tiny(epochs=0)
    init = init_checkpoint(BRICK, cfg)
    ckpt, metrics = train(BRICK, cfg)
    assert metrics == [] and ckpt.epoch == 0
    assert all(v == 0 for v in ckpt.counters.values())
    for (name, a), (_, b) in zip(init.models.named().items(), ckpt.models.named().items()):
        for pa, pb in zip(a.state_dict().values(), b.state_dict().values()):
            assert torch.equal(pa, pb), name


@pytest.fixture(scope="module")
def full_run():
    return train(BRICK, tiny())


def test_warmup_contract(full_run):
    _, metrics = full_run
    for r in metrics:
        if r["epoch"] < 2:
            assert r["d_steps"] == 0 and r["loss_adv"] == 0.0
    assert metrics[-1]["d_steps"] == 4
    # every epoch runs the external and internal steps; G also moves on the adversarial step
    assert metrics[-1]["dg_steps"] == 6
    assert metrics[-1]["g_steps"] == 6 + 4
    assert metrics[-1]["f_steps"] == 6 + 4


def test_loss_bookkeeping(full_run):
    _, metrics = full_run
    for r in metrics:
        assert r["loss_total"] == pytest.approx(r["loss_adv"] + r["loss_ext"] + r["loss_int"], abs=1e-12)
        assert all(math.isfinite(v) for v in r.values() if isinstance(v, float))


def test_loss_bookkeeping_weighted():
    _, metrics = train(BRICK, tiny(epochs=3, warmup_epochs=1, lambda_ext=0.5, lambda_int=2.0))
    for r in metrics:
        assert r["loss_total"] == pytest.approx(r["loss_adv"] + 0.5 * r["loss_ext"] + 2.0 * r["loss_int"], abs=1e-12)


def _strip(metrics):
    return [{k: v for k, v in r.items() if k != "wallclock_s"} for r in metrics]


def test_determinism(full_run):
    _, again = train(BRICK, tiny())
    assert _strip(full_run[1]) == _strip(again)


@pytest.mark.parametrize(
    "ablation, expect",
    [
        ("no_patch_adv", dict(d_steps=0, g_steps=6, f_steps=6, dg_steps=6)),
        ("no_external", dict(dg_steps=0, g_steps=4, d_steps=4)),
        ("no_internal", dict(f_steps=4, d_steps=4, dg_steps=6)),
        ("cascaded", dict(g_steps=3, dg_steps=3, f_steps=3 + 3, d_steps=3)),
    ],
)
def test_ablation_phases(ablation, expect):
    _, metrics = train(BRICK, tiny(ablation=ablation))
    last = metrics[-1]
    for k, v in expect.items():
        assert last[k] == v, (k, last)


def test_cascaded_freezes_generator():
    ckpt, metrics = train(BRICK, tiny(ablation="cascaded", epochs=3))
    g_before = {k: v.clone() for k, v in ckpt.models.G.state_dict().items()}
    ckpt.config = tiny(ablation="cascaded", epochs=6)
    ckpt, _ = train(BRICK, ckpt.config, resume=ckpt)
    for k, v in ckpt.models.G.state_dict().items():
        assert torch.equal(v, g_before[k])


def test_resume_continues_deterministically(tmp_path):
    cfg = tiny()
    ck, first = train(BRICK, tiny(epochs=4))
    path = save_checkpoint(ck, tmp_path / "mid.pkc")
    resumed = load_checkpoint(path)
    resumed.config = cfg
    _, rest = train(BRICK, cfg, resume=resumed)
    _, whole = train(BRICK, cfg)
    assert _strip(first + rest)[4:] == _strip(whole)[4:]


def test_checkpoint_roundtrip_bit_identical(full_run, tmp_path):
    ckpt, _ = full_run
    path = save_checkpoint(ckpt, tmp_path / "c.pkc")
    back = load_checkpoint(path)
    a = generate_samples(ckpt, 2, rng=Rng(3))
    b = generate_samples(back, 2, rng=Rng(3))
    for x, y in zip(a, b):
        assert torch.equal(x.data, y.data)
    assert back.counters == ckpt.counters and back.epoch == ckpt.epoch
    assert save_checkpoint(back, tmp_path / "d.pkc").read_bytes() == path.read_bytes()


def test_checkpoint_errors(full_run, tmp_path):
    ckpt, _ = full_run
    path = save_checkpoint(ckpt, tmp_path / "c.pkc")
    data = path.read_bytes()
    (tmp_path / "t.pkc").write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.pkc")
    ckpt.version = "petsgan-ckpt-0"
    try:
        save_checkpoint(ckpt, tmp_path / "old.pkc")
    finally:
        ckpt.version = "petsgan-ckpt-1"
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "old.pkc")


@pytest.mark.parametrize("h, w", [(64, 64), (64, 96), (128, 128)])
def test_generate_arbitrary_sizes(full_run, h, w):
    imgs = generate_samples(full_run[0], 2, h, w)
    assert all(i.dims == (h, w) and torch.isfinite(i.data).all() for i in imgs)


def test_generate_rounds_up_with_warning(full_run):
    with pytest.warns(UserWarning, match="rounded up"):
        imgs = generate_samples(full_run[0], 1, 60, 70)
    assert imgs[0].dims == (64, 72)


def test_generate_same_rng_same_images(full_run):
    a = generate_samples(full_run[0], 2, rng=Rng(1))
    b = generate_samples(full_run[0], 2, rng=Rng(1))
    assert all(torch.equal(x.data, y.data) for x, y in zip(a, b))


class _Flaky(PriorProvider):
    def __init__(self, fail_times, c_dims):
        self.fail_times, self.calls, self.c_dims = fail_times, 0, c_dims

    def sample_batch(self, n, g):
        self.calls += 1
        if self.calls <= self.fail_times:
            raise OSError("transient")
        return torch.zeros(n, 3, *self.c_dims)


def test_provider_retry_then_abort():
    ck, _ = train(BRICK, tiny(epochs=1, warmup_epochs=1), provider=_Flaky(2, (8, 8)))
    assert ck.epoch == 1
    with pytest.raises(ProviderError):
        train(BRICK, tiny(epochs=1), provider=_Flaky(3, (8, 8)))


def test_divergence_returns_last_good():
    cfg = tiny(epochs=4, lr_G=1e30, lr_DG=1e30, ckpt_every=1)
    with pytest.raises(TrainingDivergence) as info:
        train(BRICK, cfg)
    exc = info.value
    assert exc.last_good is not None and exc.last_good.epoch <= exc.step
