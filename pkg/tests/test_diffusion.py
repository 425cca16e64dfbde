import math

import numpy as np
import pytest
import torch
from torch import nn

from mindgen import diffusion as df
from gradcheck import fd_check_parameters

torch.set_num_threads(2)


def make_conds(b=2, L=4, d_ctx=8, D=6):
    g = torch.Generator().manual_seed(3)
    return df.ConditioningBundle(torch.randn(b, L, d_ctx, generator=g),
                                 torch.randn(b, D, generator=g))


# ---------------------------------------------------------------------------
# schedule

def test_schedule_alpha_definition():
    s = df.make_schedule(100, 1e-4, 0.02)
    assert np.allclose(s.alphas, 1.0 - s.betas, atol=0, rtol=0)


def test_schedule_alpha_bar_strictly_decreasing():
    s = df.make_schedule(1000, 1e-4, 0.02)
    assert (np.diff(s.alpha_bars) < 0).all()


def test_schedule_full_scale_terminal_alpha_bar():
    # independent oracle: product via sum of logs
    s = df.make_schedule(1000, 1e-4, 0.02)
    betas = np.linspace(1e-4, 0.02, 1000)
    log_prod = np.sum(np.log1p(-betas))
    assert s.alpha_bars[-1] < 5e-5
    assert abs(s.alpha_bars[-1] - math.exp(log_prod)) < 1e-12


def test_schedule_recurrence():
    s = df.make_schedule(500, 1e-4, 0.02)
    recur = s.alpha_bars[:-1] * s.alphas[1:]
    assert np.abs(recur - s.alpha_bars[1:]).max() < 1e-12


def test_schedule_invalid_ranges():
    with pytest.raises(ValueError):
        df.make_schedule(10, 0.0, 0.02)
    with pytest.raises(ValueError):
        df.make_schedule(10, 0.03, 0.02)
    with pytest.raises(ValueError):
        df.make_schedule(10, 1e-4, 1.0)
    with pytest.raises(ValueError):
        df.make_schedule(0, 1e-4, 0.02)
    with pytest.raises(ValueError):
        df.make_schedule(10, 1e-4, 0.02, kind="cosine")


def test_schedule_serialization_keys():
    s = df.make_schedule(1000, 1e-4, 0.02)
    d = s.to_dict()
    assert d == {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02, "kind": "linear"}


def test_alpha_bar_zero_is_one():
    s = df.make_schedule(10, 1e-4, 0.02)
    assert s.alpha_bar(0) == 1.0
    with pytest.raises(ValueError):
        s.alpha_bar(11)


# ---------------------------------------------------------------------------
# forward process

def test_forward_zero_noise():
    s = df.make_schedule(100, 1e-4, 0.02)
    x0 = torch.randn(3, 5, generator=torch.Generator().manual_seed(0))
    out = df.forward_sample(s, x0, 40, torch.zeros_like(x0))
    assert torch.equal(out, np.sqrt(s.alpha_bar(40)) * x0)


def test_forward_zero_signal():
    s = df.make_schedule(100, 1e-4, 0.02)
    eps = torch.randn(3, 5, generator=torch.Generator().manual_seed(1))
    out = df.forward_sample(s, torch.zeros_like(eps), 70, eps)
    assert torch.equal(out, np.sqrt(1 - s.alpha_bar(70)) * eps)


def test_forward_validates():
    s = df.make_schedule(100, 1e-4, 0.02)
    x0 = torch.zeros(2, 2)
    with pytest.raises(ValueError):
        df.forward_sample(s, x0, 0, x0)
    with pytest.raises(ValueError):
        df.forward_sample(s, x0, 101, x0)
    with pytest.raises(ValueError):
        df.forward_sample(s, x0, 5, torch.zeros(3, 3))


def test_forward_monte_carlo_moments():
    # 10,000 draws at fixed t: per-element mean within 4 sigma of
    # sqrt(ab)*x0, variance within 5% of (1 - ab)
    s = df.make_schedule(1000, 1e-4, 0.02)
    t = 600
    x0 = torch.tensor([0.5, -1.0, 0.0, 2.0])
    n = 10_000
    g = torch.Generator().manual_seed(99)
    eps = torch.randn(n, 4, generator=g)
    xt = df.forward_sample(s, x0.expand(n, 4), t, eps)
    ab = s.alpha_bar(t)
    mean_tol = 4.0 * math.sqrt(1.0 - ab) / math.sqrt(n)
    assert (xt.mean(dim=0) - math.sqrt(ab) * x0).abs().max() < mean_tol
    var = xt.var(dim=0, correction=1)
    assert ((var - (1 - ab)).abs() / (1 - ab)).max() < 0.05


# ---------------------------------------------------------------------------
# ddpm loss

def test_ddpm_loss_perfect_predictor_is_zero():
    s = df.make_schedule(50, 1e-3, 0.02)
    x0 = torch.full((8, 3, 4, 4), 0.7)
    conds = df.ConditioningBundle(torch.zeros(8, 2, 4), torch.zeros(8, 4))

    def oracle(x_t, t, _conds):
        ab = torch.as_tensor(s.alpha_bars, dtype=x_t.dtype)[t - 1].reshape(-1, 1, 1, 1)
        return (x_t - ab.sqrt() * x0) / (1 - ab).sqrt()

    loss = df.ddpm_loss(oracle, s, x0, conds, torch.Generator().manual_seed(5))
    assert float(loss) < 1e-10


def test_ddpm_loss_zero_predictor_near_one():
    s = df.make_schedule(100, 1e-4, 0.02)
    x0 = torch.zeros(1000, 4)
    conds = df.ConditioningBundle(torch.zeros(1000, 2, 4), torch.zeros(1000, 4))
    loss = df.ddpm_loss(lambda x, t, c: torch.zeros_like(x), s, x0, conds,
                        torch.Generator().manual_seed(6))
    assert abs(float(loss) - 1.0) < 0.1


def test_ddpm_loss_gradient_matches_fd():
    s = df.make_schedule(30, 1e-3, 0.02)
    x0 = torch.randn(4, 3, dtype=torch.float64,
                     generator=torch.Generator().manual_seed(7))
    conds = df.ConditioningBundle(torch.zeros(4, 2, 4, dtype=torch.float64),
                                  torch.zeros(4, 4, dtype=torch.float64))

    class ToyDenoiser(nn.Module):
        def __init__(self):
            super().__init__()
            self.scale = nn.Parameter(torch.tensor(0.3, dtype=torch.float64))
            self.bias = nn.Parameter(torch.tensor(-0.1, dtype=torch.float64))

        def forward(self, x_t, t, c):
            return self.scale * x_t + self.bias

    toy = ToyDenoiser()

    def loss_fn():
        return df.ddpm_loss(lambda x, t, c: toy(x, t, c), s, x0, conds,
                            torch.Generator().manual_seed(8))

    fd_check_parameters(toy, loss_fn, step=1e-3, rtol=1e-4)


def test_ddpm_loss_batch_mismatch():
    s = df.make_schedule(10, 1e-3, 0.02)
    conds = df.ConditioningBundle(torch.zeros(3, 2, 4), torch.zeros(3, 4))
    with pytest.raises(ValueError):
        df.ddpm_loss(lambda x, t, c: x, s, torch.zeros(2, 4), conds,
                     torch.Generator().manual_seed(0))


# ---------------------------------------------------------------------------
# classifier-free guidance

def linear_denoiser(seed=11):
    g = torch.Generator().manual_seed(seed)
    w_txt = torch.randn(4, generator=g)
    w_eeg = torch.randn(6, generator=g)

    def fn(x_t, t, conds):
        txt = conds.text_seq.mean(dim=1) @ torch.randn(8, 1, generator=torch.Generator().manual_seed(1))
        eeg = (conds.eeg_emb @ w_eeg).reshape(-1, 1)
        return 0.5 * x_t + txt + eeg

    return fn


def test_cfg_w_one_is_conditional():
    fn = linear_denoiser()
    conds = make_conds()
    x = torch.randn(2, 1, generator=torch.Generator().manual_seed(12))
    out = df.cfg_predict(fn, x, conds, 3, w=1.0)
    cond = fn(x, df._as_t_batch(3, 2), conds)
    assert torch.equal(out, cond)


def test_cfg_w_zero_is_unconditional():
    fn = linear_denoiser()
    conds = make_conds()
    x = torch.randn(2, 1, generator=torch.Generator().manual_seed(13))
    out = df.cfg_predict(fn, x, conds, 3, w=0.0)
    uncond = fn(x, df._as_t_batch(3, 2), conds.nulled())
    assert torch.equal(out, uncond)


@pytest.mark.parametrize("w", [-1.0, 0.5, 2.0, 7.5])
def test_cfg_affine_identity(w):
    fn = linear_denoiser()
    conds = make_conds()
    x = torch.randn(2, 1, generator=torch.Generator().manual_seed(14))
    out = df.cfg_predict(fn, x, conds, 5, w=w)
    t = df._as_t_batch(5, 2)
    direct = w * fn(x, t, conds) + (1 - w) * fn(x, t, conds.nulled())
    assert (out - direct).abs().max() <= 1e-12


# ---------------------------------------------------------------------------
# DDIM

def test_ddim_step_inverts_forward():
    s = df.make_schedule(1000, 1e-4, 0.02)
    g = torch.Generator().manual_seed(20)
    x0 = torch.randn(3, 4, generator=g)
    eps = torch.randn(3, 4, generator=g)
    t = 700
    x_t = df.forward_sample(s, x0, t, eps)
    # jump straight to 0 with the true eps: x0_pred should equal x0
    out = df.ddim_step(s, x_t, eps, t, 0)
    assert (out - x0).abs().max() < 1e-5


def test_ddim_step_t_prev_zero_returns_x0_pred():
    s = df.make_schedule(100, 1e-4, 0.02)
    x_t = torch.randn(2, 3, generator=torch.Generator().manual_seed(21))
    eps = torch.randn(2, 3, generator=torch.Generator().manual_seed(22))
    ab = s.alpha_bar(50)
    x0_pred = (x_t - np.sqrt(1 - ab) * eps) / np.sqrt(ab)
    assert torch.equal(df.ddim_step(s, x_t, eps, 50, 0), x0_pred)


def test_ddim_step_ordering_violation():
    s = df.make_schedule(100, 1e-4, 0.02)
    x = torch.zeros(1, 2)
    with pytest.raises(ValueError):
        df.ddim_step(s, x, x, 10, 10)
    with pytest.raises(ValueError):
        df.ddim_step(s, x, x, 10, 20)
    with pytest.raises(ValueError):
        df.ddim_step(s, x, x, 101, 5)


def test_ddim_timesteps_grid():
    grid = df.ddim_timesteps(1000, 50)
    ts = [t for t, _ in grid]
    assert ts[0] == 1000 and ts[-1] == 20
    assert ts == list(range(1000, 0, -20))
    assert grid[-1][1] == 0
    assert all(p == ts[i + 1] for i, (_, p) in enumerate(grid[:-1]))
    assert df.ddim_timesteps(1000, 1) == [(1000, 0)]


def test_ddim_constant_field_step_count_consistency():
    # for eps_hat independent of x_t the trajectory endpoint is exact
    s = df.make_schedule(1000, 1e-4, 0.02)
    g = torch.Generator().manual_seed(30)
    eps_hat = torch.randn(2, 5, generator=g, dtype=torch.float64)
    x_start = torch.randn(2, 5, generator=g, dtype=torch.float64)

    def run(steps):
        x = x_start.clone()
        for t, t_prev in df.ddim_timesteps(s.T, steps):
            x = df.ddim_step(s, x, eps_hat, t, t_prev)
        return x

    assert (run(50) - run(1000)).abs().max() < 1e-4


def test_ddim_sample_deterministic():
    s = df.make_schedule(100, 1e-4, 0.02)
    conds = make_conds(b=2, L=3, d_ctx=4, D=4)

    def fn(x_t, t, c):
        return 0.1 * x_t + 0.01 * c.eeg_emb.sum() * torch.ones_like(x_t)

    a = df.ddim_sample(fn, s, conds, shape=(1, 2, 2), steps=50, w=7.5, seed=9)
    b = df.ddim_sample(fn, s, conds, shape=(1, 2, 2), steps=50, w=7.5, seed=9)
    c = df.ddim_sample(fn, s, conds, shape=(1, 2, 2), steps=50, w=7.5, seed=10)
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_ddim_sample_single_step_is_one_jump():
    s = df.make_schedule(100, 1e-4, 0.02)
    conds = make_conds(b=1, L=3, d_ctx=4, D=4)

    def fn(x_t, t, c):
        return 0.2 * x_t

    out = df.ddim_sample(fn, s, conds, shape=(2,), steps=1, w=1.0, seed=4, clamp=False)
    from mindgen.seeding import derive_seed, torch_gen
    x_T = torch.randn((1, 2), generator=torch_gen(derive_seed(4, "ddim-init")),
                      dtype=torch.float64)
    eps = df.cfg_predict(fn, x_T, conds, 100, 1.0)
    manual = df.ddim_step(s, x_T, eps, 100, 0).to(torch.float32)
    assert torch.equal(out, manual)


def test_ddim_sample_clamps_to_unit_range():
    s = df.make_schedule(50, 1e-4, 0.02)
    conds = make_conds(b=1, L=3, d_ctx=4, D=4)
    out = df.ddim_sample(lambda x, t, c: torch.zeros_like(x), s, conds,
                         shape=(3, 2, 2), steps=10, w=1.0, seed=0)
    assert out.min() >= -1.0 and out.max() <= 1.0


def test_identity_codec_round_trip():
    x = torch.randn(2, 3, generator=torch.Generator().manual_seed(40))
    codec = df.LatentCodec()
    assert torch.equal(codec.decode(codec.encode(x)), x)
