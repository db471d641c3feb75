import math

import numpy as np
import pytest
import torch

from unseg_lab.noisegen import NoiseGenerator
from unseg_lab.segmodel import (
    CheckpointError,
    PromptableSegModel,
    SegConfig,
    build_victim,
    load_checkpoint,
    save_checkpoint,
    seg_loss,
)


def _inputs(b=3, s=32, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(b, 3, s, s, generator=g, dtype=dtype)
    p = torch.zeros(b, s, s, dtype=dtype)
    for i in range(b):
        p[i, 4 + i : 12 + i, 6:14] = 1
    return x, p


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return PromptableSegModel(SegConfig(image_size=32, dim=32, depth=2)).eval()


def test_forward_shape_and_finite(model):
    x, p = _inputs()
    out = model(x, p)
    assert out.shape == (3, 32, 32)
    assert torch.isfinite(out).all()


def test_forward_repeatable(model):
    x, p = _inputs()
    with torch.no_grad():
        assert torch.equal(model(x, p), model(x, p))


def test_batch_permutation_and_single_sample(model):
    x, p = _inputs(b=4)
    with torch.no_grad():
        full = model(x, p)
        perm = torch.tensor([1, 0, 2, 3])
        permuted = model(x[perm], p[perm])[perm]
        single = torch.cat([model(x[i : i + 1], p[i : i + 1]) for i in range(4)])
    torch.testing.assert_close(permuted, full, rtol=0, atol=1e-6)
    torch.testing.assert_close(single, full, rtol=0, atol=1e-5)


def test_shape_mismatch(model):
    x, p = _inputs()
    with pytest.raises(ValueError):
        model(x[:, :, :16, :16], p)
    with pytest.raises(ValueError):
        model(x, p[:2])


def test_decoder_exposes_pixel_features(model):
    x, p = _inputs()
    tokens, f_dec = model.decode(x, p)
    assert f_dec.shape == (3, 32, 32, 32)
    assert tokens.shape == (3, 4 + 1, 32)


def test_seg_loss_saturated_logits():
    target = torch.tensor([[0.0, 1.0], [1.0, 0.0]])
    logits = (target * 2 - 1) * 50
    assert seg_loss(logits, target).item() < 1e-20


def test_seg_loss_zero_logits_is_ln2():
    target = torch.randint(0, 2, (5, 8, 8)).float()
    assert seg_loss(torch.zeros(5, 8, 8), target).item() == pytest.approx(math.log(2), abs=1e-7)


def test_seg_loss_label_mod_equals_all_ones():
    g = torch.Generator().manual_seed(1)
    logits = torch.randn(2, 8, 8, generator=g)
    target = torch.randint(0, 2, (2, 8, 8), generator=g).float()
    assert seg_loss(logits, target, label_mod=True).item() == seg_loss(logits, torch.ones_like(target)).item()


def test_seg_loss_rejects_non_binary():
    with pytest.raises(ValueError):
        seg_loss(torch.zeros(4, 4), torch.full((4, 4), 2.0))


@pytest.mark.parametrize("arch", ["conv_fcn", "token_seg"])
def test_victim_contract(arch):
    torch.manual_seed(0)
    m = build_victim(arch, 5, image_size=32).eval()
    x, _ = _inputs()
    with torch.no_grad():
        out = m(x)
        again = m(x)
    assert out.shape == (3, 5, 32, 32)
    assert torch.equal(out, again)
    pred = out.argmax(1)
    assert pred.min() >= 0 and pred.max() < 5


def test_victims_accept_identical_inputs():
    x, _ = _inputs(b=2)
    shapes = {a: build_victim(a, 7, image_size=32).eval()(x).shape for a in ("conv_fcn", "token_seg")}
    assert shapes["conv_fcn"] == shapes["token_seg"] == (2, 7, 32, 32)


def test_unknown_victim():
    with pytest.raises(ValueError):
        build_victim("resnet", 3)


def test_gradient_matches_finite_differences():
    torch.manual_seed(3)
    m = PromptableSegModel(SegConfig(image_size=4, dim=8, depth=1, heads=2)).double()
    x, p = _inputs(b=2, s=4, dtype=torch.float64)
    p[:, 1:3, 1:3] = 1
    y = (torch.rand(2, 4, 4, generator=torch.Generator().manual_seed(4)) > 0.5).double()
    loss = seg_loss(m(x, p), y)
    params = dict(m.named_parameters())
    grads = torch.autograd.grad(loss, list(params.values()))
    grads = dict(zip(params, grads))
    rng = np.random.default_rng(0)
    names = sorted(params)
    h = 1e-5
    for name in rng.choice(names, size=5, replace=False):
        t = params[name]
        idx = tuple(int(rng.integers(s)) for s in t.shape)
        with torch.no_grad():
            orig = t[idx].item()
            t[idx] = orig + h
            up = seg_loss(m(x, p), y).item()
            t[idx] = orig - h
            down = seg_loss(m(x, p), y).item()
            t[idx] = orig
        fd = (up - down) / (2 * h)
        ad = grads[name][idx].item()
        assert abs(ad - fd) <= 1e-3 * max(abs(fd), abs(ad), 1e-8), (name, ad, fd)


def test_prompt_sensitivity_after_brief_training():
    torch.manual_seed(0)
    m = PromptableSegModel(SegConfig(image_size=16, dim=16, depth=1))
    x = torch.full((1, 3, 16, 16), 0.2)
    x[0, :, 2:7, 2:7] = torch.tensor([0.9, 0.1, 0.1])[:, None, None]
    x[0, :, 9:14, 9:14] = torch.tensor([0.1, 0.1, 0.9])[:, None, None]
    a = torch.zeros(1, 16, 16)
    a[0, 2:7, 2:7] = 1
    b = torch.zeros(1, 16, 16)
    b[0, 9:14, 9:14] = 1
    opt = torch.optim.Adam(m.parameters(), lr=3e-3)
    xs, ps = torch.cat([x, x]), torch.cat([a, b])
    for _ in range(60):
        loss = seg_loss(m(xs, ps), ps)
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        la, lb = m(x, a), m(x, b)
    assert not torch.allclose(la, lb)
    assert ((la > 0) == a.bool()).float().mean() > 0.9
    assert ((lb > 0) == b.bool()).float().mean() > 0.9


@pytest.mark.parametrize("factory", [
    lambda: PromptableSegModel(SegConfig(image_size=16, dim=16, depth=1)),
    lambda: NoiseGenerator(SegConfig(image_size=16, dim=16, depth=1)),
    lambda: build_victim("conv_fcn", 4, image_size=16),
    lambda: build_victim("token_seg", 4, image_size=16, dim=16, depth=1),
])
def test_checkpoint_roundtrip_exact(tmp_path, factory):
    torch.manual_seed(0)
    m = factory()
    if hasattr(m, "body"):  # populate BatchNorm running stats
        m.train()
        m(torch.rand(4, 3, 16, 16))
    m.eval()
    path = save_checkpoint(tmp_path / "m.ckpt", m, seed=7, step=3)
    m2, header = load_checkpoint(path)
    m2.eval()
    assert header["seed"] == 7 and header["step"] == 3 and header["arch"] == m.arch
    x = torch.rand(2, 3, 16, 16)
    with torch.no_grad():
        if isinstance(m, NoiseGenerator):
            p = torch.zeros(2, 16, 16)
            p[:, 3:9, 3:9] = 1
            from unseg_lab.noisegen import NoiseBudget

            a, b = m(x, p, p.bool(), NoiseBudget()), m2(x, p, p.bool(), NoiseBudget())
        elif isinstance(m, PromptableSegModel):
            p = torch.zeros(2, 16, 16)
            p[:, 3:9, 3:9] = 1
            a, b = m(x, p), m2(x, p)
        else:
            a, b = m(x), m2(x)
    assert (a - b).abs().max().item() == 0


def test_checkpoint_layout(tmp_path):
    m = build_victim("conv_fcn", 3, image_size=16)
    path = save_checkpoint(tmp_path / "c.ckpt", m)
    raw = path.read_bytes()
    assert raw[:8] == b"UNSEGCKP"
    import json
    import struct

    version, hlen = struct.unpack("<II", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen])
    assert version == 1 and header["arch"] == "conv_fcn"
    first = header["params"][0]
    n = int(np.prod(first["shape"]))
    arr = np.frombuffer(raw, dtype="<f4", count=n, offset=16 + hlen)
    assert np.array_equal(arr.reshape(first["shape"]), m.state_dict()[first["name"]].numpy())


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
