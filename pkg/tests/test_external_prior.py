import hashlib
import socket
import struct
import warnings

import numpy as np
import pytest
import torch

from petsgan.external_prior import (
    ConvergenceWarning,
    DirectoryProvider,
    GeneratorProvider,
    LatentCode,
    LinearGenerator,
    SyntheticProvider,
    invert,
    perturb_and_sample,
    synthetic_provider,
)
from petsgan.generator_service import (
    GeneratorClient,
    GeneratorServer,
    decode_request,
    decode_response,
    encode_request,
    encode_response,
    recv_message,
)
from petsgan.imaging import ImageTensor, Rng, load_image, preprocess, resize, save_image


def _linear(dim=8, shape=(3, 4, 4), seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    W = torch.randn(int(np.prod(shape)), dim, generator=g, dtype=dtype) / np.sqrt(dim)
    return LinearGenerator(W, shape)


def test_invert_recovers_least_squares_latent():
    gen = _linear()
    z0 = torch.randn(8, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    target = gen(z0)
    lstsq = torch.linalg.lstsq(gen.W, target.flatten()).solution
    code = invert(gen, target, steps=500, rng=Rng(0, "inv"))
    assert (code.z - lstsq).abs().max().item() <= 1e-3
    assert code.meta["best_loss"] <= code.meta["final_loss"] + 1e-15


def test_invert_zero_steps_returns_initial_latent():
    gen = _linear()
    rng = Rng(3, "inv")
    code = invert(gen, torch.zeros(3, 4, 4, dtype=torch.float64), steps=0, rng=rng)
    expect = torch.randn(8, generator=rng.torch(), dtype=torch.float64)
    assert torch.equal(code.z, expect)


def test_invert_plateaus_at_projection_residual():
    gen = _linear()
    g = torch.Generator().manual_seed(5)
    t = torch.randn(48, generator=g, dtype=torch.float64)
    W = gen.W
    resid = t - W @ torch.linalg.pinv(W) @ t
    code = invert(gen, t.reshape(3, 4, 4), steps=800, rng=Rng(0), lambda_pix=0.0, lambda_feat=1.0,
                  feature_fn=lambda x: x.flatten(1))
    expected = (resid**2).mean().item()
    assert code.meta["best_loss"] == pytest.approx(expected, rel=1e-4)


def test_invert_deterministic():
    gen = _linear()
    target = gen(torch.ones(8, dtype=torch.float64))
    a = invert(gen, target, steps=20, rng=Rng(9))
    b = invert(gen, target, steps=20, rng=Rng(9))
    assert torch.equal(a.z, b.z)


def test_invert_dimension_mismatch():
    with pytest.raises(ValueError):
        invert(_linear(), torch.zeros(3, 5, 5, dtype=torch.float64), steps=3)


def test_invert_warns_when_loss_never_drops():
    gen = _linear()
    target = gen(torch.zeros(8, dtype=torch.float64))
    with pytest.warns(ConvergenceWarning):
        invert(gen, target, steps=3, lr=1e-12, z_init=torch.zeros(8))


def test_perturb_zero_sigma_is_copies():
    gen = _linear(shape=(3, 8, 8))
    z = LatentCode(torch.randn(8, dtype=torch.float64))
    imgs = perturb_and_sample(gen, z, sigma=0.0, n=4, rng=Rng(0), c_dims=(2, 2))
    for im in imgs:
        assert im.dims == (2, 2)
        assert torch.equal(im.data, imgs[0].data)
    one = perturb_and_sample(gen, z, sigma=0.5, n=1, rng=Rng(0), c_dims=(2, 2))
    assert len(one) == 1 and one[0].dims == (2, 2)


def test_perturb_monte_carlo_mean():
    gen = _linear(shape=(3, 8, 8))
    z = LatentCode(torch.randn(8, dtype=torch.float64, generator=torch.Generator().manual_seed(2)))
    n = 10_000
    imgs = torch.stack([im.data for im in perturb_and_sample(gen, z, sigma=1.0, n=n, rng=Rng(4), c_dims=(4, 4))])
    from petsgan.imaging import resize_tensor

    center = resize_tensor(gen(z.z), 4, 4, "bicubic")
    se = imgs.std(dim=0) / np.sqrt(n)
    assert ((imgs.mean(0) - center).abs() <= 3 * se + 1e-12).float().mean().item() >= 0.99


def test_perturb_reports_failing_sample():
    def bad(z):
        raise RuntimeError("boom")

    bad.latent_dim = 2
    with pytest.raises(RuntimeError, match="sample 0"):
        perturb_and_sample(bad, LatentCode(torch.zeros(2)), 0.5, 1, Rng(0))


@pytest.fixture(scope="module")
def exemplar():
    I, c_I = preprocess(load_image("tests/data/astronaut_64.png"), 64, 8)
    return I, c_I


def test_identity_provider_reproduces_low_res(exemplar):
    I, c_I = exemplar
    p = SyntheticProvider(I, c_I.dims, ["identity"])
    g = torch.Generator().manual_seed(0)
    for _ in range(5):
        assert torch.equal(p.sample(g).data, c_I.data)


def test_flip_provider_two_element_support(exemplar):
    I, c_I = exemplar
    p = SyntheticProvider(I, c_I.dims, ["flip"])
    g = torch.Generator().manual_seed(0)
    seen = set()
    for _ in range(40):
        x = p.sample(g).data
        if torch.equal(x, c_I.data):
            seen.add("id")
        elif torch.equal(x, c_I.data.flip(-1)):
            seen.add("mirror")
        else:
            pytest.fail("sample outside {c_I, mirror(c_I)}")
    assert seen == {"id", "mirror"}


def test_crop_flip_provider_is_diverse(exemplar):
    I, c_I = exemplar
    p = synthetic_provider(I, c_I.dims, ["crop", "flip"])
    g = Rng(0, "prior").torch()
    hashes = {hashlib.sha1(p.sample(g).data.numpy().tobytes()).hexdigest() for _ in range(1000)}
    assert len(hashes) >= 50


def test_provider_samples_have_exact_dims_and_range(exemplar):
    I, c_I = exemplar
    p = synthetic_provider(I, c_I.dims)
    p.debug = True
    g = torch.Generator().manual_seed(1)
    for _ in range(50):
        x = p.sample(g)
        assert x.dims == c_I.dims
    batch = p.sample_batch(4, g)
    assert batch.shape == (4, 3, *c_I.dims) and batch.min() >= -1 and batch.max() <= 1


def test_provider_rejects_empty_spec(exemplar):
    I, c_I = exemplar
    with pytest.raises(ValueError):
        SyntheticProvider(I, c_I.dims, [])
    with pytest.raises(ValueError):
        SyntheticProvider(I, c_I.dims, ["sharpen"])


def test_directory_provider(tmp_path, exemplar):
    I, c_I = exemplar
    for i in range(3):
        save_image(resize(I, 32 + 8 * i, 32, "bicubic"), tmp_path / f"p{i}.png")
    p = DirectoryProvider(tmp_path, c_I.dims)
    assert p.sample(torch.Generator().manual_seed(0)).dims == c_I.dims
    with pytest.raises(ValueError):
        DirectoryProvider(tmp_path / "missing_dir_is_empty", c_I.dims) if (tmp_path / "missing_dir_is_empty").mkdir() is None else None


def test_generator_provider_pool():
    gen = _linear(shape=(3, 16, 16), dtype=torch.float32)
    p = GeneratorProvider(gen, LatentCode(torch.zeros(8)), (4, 4), sigma=0.5, pool_size=16)
    g = torch.Generator().manual_seed(0)
    xs = [p.sample(g) for _ in range(20)]
    assert all(x.dims == (4, 4) for x in xs)
    assert len(p._pool) == 16


# ---- wire protocol ---------------------------------------------------------


def test_wire_roundtrip():
    z = np.array([0.5, -1.25, 3.0], dtype=np.float32)
    payload = encode_request(z)
    assert payload[:4] == struct.pack("<I", 3)
    assert np.array_equal(decode_request(payload), z)
    img = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    resp = encode_response(img)
    assert struct.unpack_from("<III", resp) == (2, 3, 4)
    assert np.array_equal(decode_response(resp), img)
    with pytest.raises(ValueError):
        decode_response(resp[:-4])


@pytest.fixture
def served_generator():
    gen = _linear(dim=4, shape=(3, 4, 4), dtype=torch.float32)
    with GeneratorServer(gen, 4, (3, 4, 4)) as srv:
        yield gen, srv


def test_client_handshake_and_decode(served_generator):
    gen, srv = served_generator
    with GeneratorClient(srv.address) as client:
        assert client.latent_dim == 4 and client.out_shape == (3, 4, 4)
        z = torch.tensor([[0.1, 0.2, -0.3, 1.0], [1.0, 0.0, 0.0, 0.0]])
        assert torch.allclose(client(z), gen(z), atol=1e-6)
        with pytest.raises(ValueError):
            client(torch.zeros(1, 3))


def test_raw_socket_handshake(served_generator):
    _, srv = served_generator
    host, port = srv.address.rsplit(":", 1)
    with socket.create_connection((host, int(port))) as s:
        import json

        hs = json.loads(recv_message(s))
        assert hs["protocol"] == "petsgan-gen-1" and hs["latent_dim"] == 4


def test_remote_perturb_matches_in_process(served_generator):
    gen, srv = served_generator
    z = LatentCode(torch.tensor([0.3, -0.1, 0.2, 0.0]))
    with GeneratorClient(srv.address) as client:
        remote = perturb_and_sample(client, z, 0.5, 3, Rng(1), (2, 2))
    local = perturb_and_sample(gen, z, 0.5, 3, Rng(1), (2, 2))
    for a, b in zip(remote, local):
        assert torch.allclose(a.data, b.data, atol=1e-5)


def test_remote_inversion_with_finite_difference_gradients(served_generator):
    gen, srv = served_generator
    z0 = torch.tensor([0.5, -0.5, 0.25, 1.0])
    target = gen(z0)
    with GeneratorClient(srv.address, fd_step=1e-2) as client:
        code = invert(client, target, steps=150, rng=Rng(0), lambda_pix=0.0, feature_fn=lambda x: x.flatten(1))
    assert (code.z - z0).abs().max().item() < 1e-2
