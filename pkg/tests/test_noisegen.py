import math

import numpy as np
import pytest
import torch

from unseg_lab.data import read_image, write_image
from unseg_lab.datagen import MaskPrompt, prompt_from_label
from unseg_lab.noisegen import (
    NoiseBudget,
    NoiseGenerator,
    apply_noise,
    eg_scaling_check,
    eps_map,
    generate_noise,
    noise_from_features,
    prompt_region,
)
from unseg_lab.segmodel import PromptableSegModel, SegConfig, seg_loss

EPS_T, EPS_U = 8 / 255, 2 / 255


@pytest.fixture(scope="module")
def generator():
    torch.manual_seed(0)
    g = NoiseGenerator(SegConfig(image_size=32, dim=32, depth=2)).eval()
    # large tokens push tanh into saturation, the hardest case for the strict bound
    with torch.no_grad():
        g.noise_head[-1].weight.mul_(50)
    return g


def _sample(seed, size=32):
    rng = np.random.default_rng(seed)
    img = rng.random((size, size, 3)).astype(np.float32)
    lab = np.zeros((size, size), dtype=np.int64)
    y, x = rng.integers(0, size - 10, 2)
    lab[y : y + int(rng.integers(3, 10)), x : x + int(rng.integers(3, 10))] = 1
    return img, lab


def test_zero_tokens_give_zero_noise():
    f = torch.randn(2, 8, 4, 4)
    delta = noise_from_features(f, torch.zeros(3, 8), torch.full((2, 4, 4), EPS_T))
    assert torch.count_nonzero(delta) == 0


def test_zero_noise_generator(generator):
    g = NoiseGenerator(SegConfig(image_size=32, dim=32, depth=1))
    g.zero_noise()
    img, lab = _sample(0)
    d = generate_noise(g, img, prompt_from_label(lab, 1, "mask"), NoiseBudget())
    assert not d.any()


def test_hand_computed_two_by_two():
    # F[i][j] is the C=2 decoder feature at pixel (i, j)
    feats = [[(1.0, 0.0), (0.0, 1.0)], [(1.0, 1.0), (-0.5, 2.0)]]
    tokens = [(0.5, 0.0), (0.0, -1.0), (0.25, 0.25)]
    region = [[1, 0], [0, 1]]
    expected = np.zeros((3, 2, 2))
    for k, (t0, t1) in enumerate(tokens):
        for i in range(2):
            for j in range(2):
                f0, f1 = feats[i][j]
                eps = EPS_T if region[i][j] else EPS_U
                expected[k, i, j] = math.tanh(f0 * t0 + f1 * t1) * eps
    f_dec = torch.tensor(feats, dtype=torch.float64).permute(2, 0, 1)[None]
    t = torch.tensor(tokens, dtype=torch.float64)
    e = eps_map(torch.tensor(region, dtype=torch.bool), NoiseBudget())[None]
    got = noise_from_features(f_dec, t, e)[0].numpy()
    np.testing.assert_allclose(got, expected, rtol=1e-15, atol=0)
    np.testing.assert_allclose(noise_from_features(f_dec, t, e, scale=4)[0].numpy(), expected / 4, rtol=1e-15)


def test_saturated_tanh_stays_strictly_inside():
    f = torch.full((1, 4, 2, 2), 100.0)
    d = noise_from_features(f, torch.ones(3, 4), torch.full((1, 2, 2), EPS_T, dtype=torch.float32))
    assert d.dtype == torch.float32
    assert d.abs().max().item() < EPS_T


@pytest.mark.parametrize("kind", ["mask", "box", "point"])
def test_bounds_per_region(generator, kind):
    for seed in range(20):
        img, lab = _sample(seed)
        prompt = prompt_from_label(lab, 1, kind)
        region = prompt_region(prompt)
        d = generate_noise(generator, img, prompt, NoiseBudget())
        assert d.shape == img.shape
        assert np.abs(d).max() < EPS_T
        assert np.abs(d[~region]).max() < EPS_U


def test_empty_prompt_rejected(generator):
    img, _ = _sample(0)
    with pytest.raises(ValueError):
        generate_noise(generator, img, MaskPrompt(np.zeros((32, 32), bool), "mask"), NoiseBudget())


def test_point_region_is_disk_and_box_region_is_box():
    lab = np.zeros((32, 32), dtype=np.int64)
    lab[10:20, 10:20] = 1
    pt = prompt_from_label(lab, 1, "point")
    region = prompt_region(pt)
    (y,), (x,) = np.nonzero(pt.mask)
    yy, xx = np.mgrid[0:32, 0:32]
    assert np.array_equal(region, (yy - y) ** 2 + (xx - x) ** 2 <= 9)
    box = prompt_from_label(lab, 1, "box")
    assert np.array_equal(prompt_region(box), box.mask)


def test_budget_validation():
    with pytest.raises(ValueError):
        NoiseBudget(eps_target=2 / 255, eps_unrelated=8 / 255)
    with pytest.raises(ValueError):
        NoiseBudget(train_scale=0)
    with pytest.raises(ValueError):
        NoiseBudget(train_scale=1.5)
    with pytest.raises(ValueError):
        NoiseBudget(eps_target=0)
    assert NoiseBudget().scale("infer") == 1


def test_apply_noise_identity_and_clip():
    img = np.random.default_rng(0).random((8, 8, 3))
    assert np.array_equal(apply_noise(img, np.zeros_like(img)), img)
    img[0, 0, 0] = 1.0
    d = np.zeros_like(img)
    d[0, 0, 0] = 0.5
    assert apply_noise(img, d)[0, 0, 0] == 1.0
    with pytest.raises(ValueError):
        apply_noise(img, d[:4])


def test_png_quantization_error(generator, tmp_path):
    for seed in range(10):
        img, lab = _sample(seed)
        img = np.round(img * 255) / 255  # start from an 8-bit image
        d = generate_noise(generator, img, prompt_from_label(lab, 1, "mask"), NoiseBudget())
        out = apply_noise(img, d)
        write_image(tmp_path / "x.png", out)
        back = read_image(tmp_path / "x.png")
        assert np.abs(back - out).max() <= 1 / 255


@pytest.mark.parametrize("v", [1, 4])
def test_eg_scaling_exact(generator, v):
    img, lab = _sample(1)
    assert eg_scaling_check(generator, img, prompt_from_label(lab, 1, "mask"), NoiseBudget(train_scale=v))


def test_eg_scaling_random(generator):
    rng = np.random.default_rng(0)
    for i in range(6):
        v = int(rng.choice([2, 3, 5]))
        img, lab = _sample(100 + i)
        budget = NoiseBudget(train_scale=v)
        prompt = prompt_from_label(lab, 1, "box")
        tr = generate_noise(generator, img, prompt, budget, "train")
        inf = generate_noise(generator, img, prompt, budget, "infer")
        assert np.array_equal(tr, inf / v)


def test_linear_in_eps(generator):
    img, lab = _sample(2)
    prompt = prompt_from_label(lab, 1, "mask")
    base = generate_noise(generator, img, prompt, NoiseBudget(4 / 255, 1 / 255))
    for a in (0.5, 2.0, 3.7):
        scaled = generate_noise(generator, img, prompt, NoiseBudget(a * 4 / 255, a / 255))
        np.testing.assert_allclose(scaled, a * base, rtol=1e-6, atol=1e-9)


def test_budget_map_follows_prompt():
    budget = NoiseBudget()
    r1 = np.zeros((16, 16), bool)
    r1[2:6, 2:6] = True
    r2 = np.roll(r1, (5, 7), axis=(0, 1))
    m1, m2 = eps_map(r1, budget), eps_map(r2, budget)
    assert np.array_equal(np.roll(m1, (5, 7), axis=(0, 1)), m2)
    assert np.array_equal(m1 == budget.eps_target, r1)
    assert np.all(m1[~r1] == budget.eps_unrelated)


def test_gradient_wrt_noise_tokens_matches_finite_differences():
    torch.manual_seed(0)
    cfg = SegConfig(image_size=8, dim=8, depth=1, heads=2)
    gen = NoiseGenerator(cfg).double()
    gen.freeze_core()
    surrogate = PromptableSegModel(cfg).double()
    g = torch.Generator().manual_seed(1)
    x = 0.25 + 0.5 * torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64)
    p = torch.zeros(2, 8, 8, dtype=torch.float64)
    p[:, 2:6, 1:5] = 1
    y = p.clone()
    budget = NoiseBudget(train_scale=1)

    def loss_fn():
        d = gen(x, p, p.bool(), budget, "train")
        return seg_loss(surrogate(apply_noise(x, d), p), y)

    (grad,) = torch.autograd.grad(loss_fn(), [gen.noise_tokens])
    rng = np.random.default_rng(2)
    h = 1e-5
    for _ in range(5):
        idx = (int(rng.integers(3)), int(rng.integers(8)))
        with torch.no_grad():
            orig = gen.noise_tokens[idx].item()
            gen.noise_tokens[idx] = orig + h
            up = loss_fn().item()
            gen.noise_tokens[idx] = orig - h
            down = loss_fn().item()
            gen.noise_tokens[idx] = orig
        fd = (up - down) / (2 * h)
        assert abs(grad[idx].item() - fd) <= 1e-3 * max(abs(fd), 1e-12)
