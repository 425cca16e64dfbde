"""Noise schedule, forward process, DDPM objective, CFG, and DDIM sampling.

The guidance combination keeps the (1 - w) unconditional coefficient exactly
as used for training-time dual conditioning: eps_hat = w * cond + (1 - w) *
uncond, where the unconditional branch evaluates the denoiser with both null
sentinels (all-zeros text sequence and EEG embedding).
"""

from dataclasses import dataclass, field

import numpy as np
import torch

from .seeding import derive_seed, torch_gen


@dataclass
class NoiseSchedule:
    """beta/alpha/alpha_bar tables, 1-indexed by timestep t in [1, T]."""

    T: int
    betas: np.ndarray        # length T, float64
    alphas: np.ndarray       # 1 - beta
    alpha_bars: np.ndarray   # cumulative product of alphas

    def alpha_bar(self, t: int) -> float:
        """alpha_bar_t with alpha_bar_0 defined as 1."""
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def _check_t(self, t):
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")

    def to_dict(self):
        return {"T": self.T, "beta_start": float(self.betas[0]),
                "beta_end": float(self.betas[-1]), "kind": "linear"}


def make_schedule(T: int, beta_start=1e-4, beta_end=0.02, kind="linear") -> NoiseSchedule:
    if kind != "linear":
        raise ValueError(f"unsupported schedule kind {kind!r}")
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got "
                         f"({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def forward_sample(s: NoiseSchedule, x0: torch.Tensor, t: int,
                   eps: torch.Tensor) -> torch.Tensor:
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps."""
    s._check_t(t)
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    ab = s.alpha_bar(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def forward_sample_batch(s: NoiseSchedule, x0: torch.Tensor, t: torch.Tensor,
                         eps: torch.Tensor) -> torch.Tensor:
    """Per-item timesteps: t is a [B] int tensor in [1, T]."""
    if ((t < 1) | (t > s.T)).any():
        raise ValueError("timestep outside [1, T]")
    ab = torch.as_tensor(s.alpha_bars, dtype=x0.dtype)[t - 1]
    shape = (x0.shape[0],) + (1,) * (x0.ndim - 1)
    ab = ab.reshape(shape)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


# ---------------------------------------------------------------------------
# conditioning bundle and null sentinels

@dataclass
class ConditioningBundle:
    """Batch conditioning: text token sequence embeddings and EEG embedding.

    Null conditions are all-zeros tensors of the correct shape.
    """

    text_seq: torch.Tensor  # [B, L, d_ctx]
    eeg_emb: torch.Tensor   # [B, D]

    def __post_init__(self):
        if self.text_seq.shape[0] != self.eeg_emb.shape[0]:
            raise ValueError("text and EEG batch sizes differ")

    @property
    def batch(self):
        return self.text_seq.shape[0]

    def nulled(self):
        return ConditioningBundle(torch.zeros_like(self.text_seq),
                                  torch.zeros_like(self.eeg_emb))

    def select(self, idx):
        return ConditioningBundle(self.text_seq[idx], self.eeg_emb[idx])


def null_text_sequence(batch, max_len, d_ctx, dtype=torch.float32):
    return torch.zeros(batch, max_len, d_ctx, dtype=dtype)


def null_eeg_embedding(batch, dim, dtype=torch.float32):
    return torch.zeros(batch, dim, dtype=dtype)


# ---------------------------------------------------------------------------
# training objective

def ddpm_loss(denoise_fn, s: NoiseSchedule, x0: torch.Tensor,
              conds: ConditioningBundle, rng: torch.Generator) -> torch.Tensor:
    """Noise-prediction MSE at uniformly sampled timesteps.

    denoise_fn(x_t, t, conds) -> eps prediction shaped like x_t.
    """
    if x0.shape[0] != conds.batch:
        raise ValueError("x0 and conditioning batch sizes differ")
    b = x0.shape[0]
    t = torch.randint(1, s.T + 1, (b,), generator=rng)
    eps = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
    x_t = forward_sample_batch(s, x0, t, eps)
    pred = denoise_fn(x_t, t, conds)
    loss = ((eps - pred) ** 2).mean()
    if not torch.isfinite(loss):
        raise RuntimeError("non-finite diffusion loss")
    return loss


# ---------------------------------------------------------------------------
# classifier-free guidance

def cfg_predict(denoise_fn, x_t: torch.Tensor, conds: ConditioningBundle,
                t, w: float) -> torch.Tensor:
    """w * eps(x_t, c_t, c_e, t) + (1 - w) * eps(x_t, t)."""
    t = _as_t_batch(t, x_t.shape[0])
    cond = denoise_fn(x_t, t, conds)
    uncond = denoise_fn(x_t, t, conds.nulled())
    return w * cond + (1.0 - w) * uncond


def _as_t_batch(t, b):
    if torch.is_tensor(t):
        return t
    return torch.full((b,), int(t), dtype=torch.long)


# ---------------------------------------------------------------------------
# DDIM (deterministic, eta = 0)

def ddim_step(s: NoiseSchedule, x_t: torch.Tensor, eps_hat: torch.Tensor,
              t: int, t_prev: int) -> torch.Tensor:
    """One deterministic DDIM update from t to t_prev (alpha_bar_0 = 1)."""
    if not 0 <= t_prev < t <= s.T:
        raise ValueError(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    ab_t = s.alpha_bar(t)
    ab_p = s.alpha_bar(t_prev)
    x0_pred = (x_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    return np.sqrt(ab_p) * x0_pred + np.sqrt(1.0 - ab_p) * eps_hat


def ddim_timesteps(T: int, steps: int):
    """Evenly spaced descending grid of length `steps`, from T down;
    the final transition lands on 0."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps > T:
        raise ValueError(f"steps ({steps}) cannot exceed T ({T})")
    ts = [int(round(T - i * T / steps)) for i in range(steps)]
    if len(set(ts)) != len(ts) or any(x <= 0 for x in ts):
        raise ValueError(f"degenerate DDIM grid for T={T}, steps={steps}")
    prevs = ts[1:] + [0]
    return list(zip(ts, prevs))


class LatentCodec:
    """Image <-> latent maps; the identity codec is the desk-scale default,
    standing in for a learned autoencoder."""

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        return image

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        return latent


IDENTITY_CODEC = LatentCodec()


def ddim_trajectory(denoise_fn, s: NoiseSchedule, conds: ConditioningBundle,
                    x_start: torch.Tensor, steps: int, w: float,
                    codec: LatentCodec = IDENTITY_CODEC, clamp=True) -> torch.Tensor:
    """Run the guided DDIM loop from a given x_T down to t = 0."""
    x = x_start
    for t, t_prev in ddim_timesteps(s.T, steps):
        eps_hat = cfg_predict(denoise_fn, x, conds, t, w)
        x = ddim_step(s, x, eps_hat, t, t_prev)
    img = codec.decode(x.to(torch.float32))
    return img.clamp(-1.0, 1.0) if clamp else img


def ddim_sample(denoise_fn, s: NoiseSchedule, conds: ConditioningBundle,
                shape, steps=50, w=7.5, seed=0, codec: LatentCodec = IDENTITY_CODEC,
                clamp=True) -> torch.Tensor:
    """Deterministic DDIM sampler with classifier-free guidance.

    shape is the latent shape per item, e.g. (3, 32, 32); returns a
    [B, *shape] tensor decoded through the codec and clamped to [-1, 1].
    """
    b = conds.batch
    gen = torch_gen(derive_seed(seed, "ddim-init"))
    # float64 state: the 1/sqrt(alpha_bar) factor near t=T amplifies rounding
    x = torch.randn((b, *shape), generator=gen, dtype=torch.float64)
    return ddim_trajectory(denoise_fn, s, conds, x, steps, w, codec, clamp)
