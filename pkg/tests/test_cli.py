import csv
import dataclasses
import json

import pytest
import torch
from PIL import Image

from petsgan import cli
from petsgan.external_prior import LinearGenerator
from petsgan.generator_service import GeneratorServer
from petsgan.trainer import RunConfig

BRICK = "tests/data/brick_64.png"
TINY = ["--preset", "desk", "--epochs", "2", "--ir-blocks", "1", "--batch-prior", "4"]


@pytest.fixture(autouse=True)
def _runs_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("PETSGAN_RUNS_DIR", str(tmp_path / "default_runs"))


def _run(argv, capsys):
    code = cli.run([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out.strip().splitlines()[-1]) if code == 0 else None), err


def test_every_config_field_has_one_flag():
    p = cli.build_parser()
    train = p._subparsers._group_actions[0].choices["train"]
    flags = [o for a in train._actions for o in a.option_strings]
    for f in dataclasses.fields(RunConfig):
        assert flags.count("--" + f.name.replace("_", "-")) == 1


def test_train_smoke_default_layout(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("PETSGAN_RUNS_DIR", str(tmp_path / "runs"))
    code, res, _ = _run(["train", "--image", BRICK, "--seed", "7", "--samples", "2", *TINY], capsys)
    assert code == 0
    run_dir = tmp_path / "runs" / res["out"].split("/")[-1]
    assert run_dir.name.endswith("-7")
    for name in ("checkpoint.pkc", "metrics.jsonl", "config.json"):
        assert (run_dir / name).exists()
    cfg = json.loads((run_dir / "config.json").read_text())
    assert cfg["seed"] == 7 and cfg["max_side"] == 64 and cfg["epochs"] == 2
    assert len(list((run_dir / "samples").glob("*.png"))) == 2


def _metrics(path):
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    for r in rows:
        r.pop("wallclock_s")
    return rows


def test_resolved_config_reproduces_metrics(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _run(["train", "--image", BRICK, "--out", a, "--samples", "1", *TINY], capsys)[0] == 0
    assert _run(["train", "--image", BRICK, "--out", b, "--samples", "1", "--config", a / "config.json"], capsys)[0] == 0
    assert _metrics(a / "metrics.jsonl") == _metrics(b / "metrics.jsonl")


def test_config_chain_precedence(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"epochs": 3, "seed": 5}))
    p = cli.build_parser()
    args = p.parse_args(["train", "--image", BRICK, "--preset", "desk", "--config", str(conf), "--epochs", "1"])
    cfg = cli.resolve_config(args)
    assert (cfg.epochs, cfg.seed, cfg.max_side) == (1, 5, 64)
    conf.write_text(json.dumps({"epochs": {"nested": 1}}))
    with pytest.raises(cli.UsageError):
        cli.resolve_config(p.parse_args(["train", "--image", BRICK, "--config", str(conf)]))


def test_unknown_flag_suggests(capsys):
    code, _, err = _run(["train", "--image", BRICK, "--epoch", "3"], capsys)
    assert code == 1
    assert "did you mean --epochs" in err


def test_unknown_command_suggests(capsys):
    code, _, err = _run(["genrate", "--ckpt", "x"], capsys)
    assert code == 1 and "generate" in err


def test_runtime_failure_exit_code(tmp_path, capsys):
    code, _, err = _run(["generate", "--ckpt", tmp_path / "missing.pkc", "--out", tmp_path / "g"], capsys)
    assert code == 2 and "generate failed" in err


@pytest.fixture(scope="module")
def tiny_ckpt(tmp_path_factory):
    out = tmp_path_factory.mktemp("ck")
    assert cli.run(["train", "--image", BRICK, "--out", str(out), "--samples", "1", *TINY]) == 0
    return out / "checkpoint.pkc"


def test_generate_arbitrary_size(tiny_ckpt, tmp_path, capsys):
    code, res, _ = _run(["generate", "--ckpt", tiny_ckpt, "--n", "3", "--size", "64x96", "--out", tmp_path / "g"], capsys)
    assert code == 0 and res["dims"] == [64, 96]
    pngs = sorted((tmp_path / "g").glob("*.png"))
    assert len(pngs) == 3 and all(Image.open(p).size == (96, 64) for p in pngs)
    assert (tmp_path / "g" / "config.json").exists()


def test_invert_then_train_from_prior_dir(tmp_path, capsys):
    g = torch.Generator().manual_seed(0)
    gen = LinearGenerator(torch.randn(3 * 64 * 64, 6, generator=g) * 0.1, (3, 64, 64))
    with GeneratorServer(gen, 6, (3, 64, 64)) as srv:
        code, res, _ = _run(["invert", "--image", BRICK, "--generator", srv.address, "--steps", "10", "--n", "5",
                             "--max-side", "64", "--out", tmp_path / "inv"], capsys)
    assert code == 0
    prior = tmp_path / "inv" / "prior"
    assert len(list(prior.glob("*.png"))) == 5
    assert Image.open(next(prior.glob("*.png"))).size == (8, 8)
    code, _, _ = _run(["train", "--image", BRICK, "--prior-dir", prior, "--out", tmp_path / "t", "--samples", "1", *TINY], capsys)
    assert code == 0


def test_upscale_and_manipulate(tiny_ckpt, tmp_path, capsys):
    code, res, _ = _run(["upscale", "--ckpt", tiny_ckpt, "--image-hi", "tests/data/astronaut_64.png", "--factor", "2",
                         "--steps", "2", "--n", "1", "--out", tmp_path / "u"], capsys)
    assert code == 0 and (tmp_path / "u" / "hires_000.png").exists()
    assert _run(["upscale", "--ckpt", tiny_ckpt, "--image-hi", BRICK, "--factor", "3", "--out", tmp_path / "u3"], capsys)[0] == 2
    code, res, _ = _run(["manipulate", "--task", "edit", "--content", "tests/data/coffee_64.png", "--image", BRICK,
                         "--steps", "3", "--out", tmp_path / "m"], capsys)
    assert code == 0 and res["dims"] == [64, 64]


def test_eval_directory_writes_reports(tmp_path, capsys):
    imgs = tmp_path / "imgs"
    imgs.mkdir()
    for name in ("brick_64.png", "grass_64.png"):
        (imgs / name).write_bytes(open(f"tests/data/{name}", "rb").read())
    code, res, _ = _run(["eval", "--images", imgs, "--n", "2", "--out", tmp_path / "e", *TINY], capsys)
    assert code == 0 and res["images"] == 2
    rows = list(csv.DictReader(open(tmp_path / "e" / "aggregate.csv")))
    assert [r["image"] for r in rows] == ["brick_64.png", "grass_64.png", "mean"]
    assert json.loads((tmp_path / "e" / "brick_64.json").read_text())["n_samples"] == 2


def test_verify_prop1_reports_precondition_failure(tmp_path, capsys):
    code, _, err = _run(["verify-prop1", "--image", BRICK, "--samples", "2", "--steps", "1", "--out", tmp_path / "v"], capsys)
    assert code == 2 and "PSNR" in err


def test_verify_prop1_report(tmp_path, capsys):
    code, res, _ = _run(["verify-prop1", "--image", BRICK, "--samples", "20", "--out", tmp_path / "v"], capsys)
    assert code == 0 and isinstance(res["holds"], bool)
    rep = json.loads((tmp_path / "v" / "prop1.json").read_text())
    assert len(rep["per_sample"]) == 20
