"""Denoiser with text cross-attention sites and the per-site EEG adapter.

Each cross-attention site computes single-head scaled dot-product attention
over the text token sequence and adds the EEG branch on the same normalized
pre-attention hidden states Z:

    Z_new = Softmax(Q K^T / sqrt(d)) V + lam * (Z * alpha + beta)

with (alpha, beta) produced per site by a small feature projection from the
frozen EEG embedding. The projection's last layer is zero-initialized, so a
fresh adapter (or lam = 0) leaves the text-only model behavior untouched.

Ablation injectors: "film" (the adapter above), "xattn" (EEG attended as a
one-token sequence through per-site key/value projections), and "direct"
(the EEG embedding substituted for the text sequence, no new parameters).
"""

import math
from dataclasses import dataclass

import torch
from torch import nn

from .diffusion import ConditioningBundle
from .encoders import EEGEncoder, weights_checksum, normalize

INJECTOR_KINDS = ("film", "xattn", "direct")


# ---------------------------------------------------------------------------
# adapter pieces

class FeatureProjection(nn.Module):
    """linear -> normalization -> activation -> linear, split into (alpha, beta).

    The final layer starts at zero so the adapter is a no-op until trained.
    """

    def __init__(self, embed_dim, hidden, width):
        super().__init__()
        self.width = width
        self.linear1 = nn.Linear(embed_dim, hidden)
        self.norm = nn.LayerNorm(hidden)
        self.act = nn.SiLU()
        self.linear2 = nn.Linear(hidden, 2 * width)
        nn.init.zeros_(self.linear2.weight)
        nn.init.zeros_(self.linear2.bias)

    def forward(self, c_e):
        out = self.linear2(self.act(self.norm(self.linear1(c_e))))
        return out[..., :self.width], out[..., self.width:]


def film_modulate(z, alpha, beta):
    """Per-token FiLM: z * alpha + beta, (alpha, beta) broadcast over tokens."""
    if z.shape[-1] != alpha.shape[-1] or z.shape[-1] != beta.shape[-1]:
        raise ValueError(f"width mismatch: z {z.shape[-1]}, alpha {alpha.shape[-1]}, "
                         f"beta {beta.shape[-1]}")
    if z.ndim == alpha.ndim + 1:
        alpha = alpha.unsqueeze(-2)
        beta = beta.unsqueeze(-2)
    return z * alpha + beta


def cross_attention(z, context, w_q, w_k, w_v):
    """Single-head scaled dot-product attention.

    z: [.., N, d_s] queries, context: [.., L, d_ctx] keys/values;
    Q = z w_q, K = context w_k, V = context w_v, scale 1/sqrt(d_s).
    """
    q = z @ w_q
    k = context @ w_k
    v = context @ w_v
    if q.shape[-1] != k.shape[-1]:
        raise ValueError("query/key width mismatch")
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    return torch.softmax(logits, dim=-1) @ v


@dataclass
class AdapterConfig:
    injector: str = "film"
    embed_dim: int = 128        # frozen EEG embedding dimension
    hidden: int = 64            # feature-projection bottleneck
    site_widths: tuple = (96, 96, 96, 96)
    lam: float = 1.0

    def __post_init__(self):
        if self.injector not in INJECTOR_KINDS:
            raise ValueError(f"injector must be one of {INJECTOR_KINDS}")

    @property
    def num_sites(self):
        return len(self.site_widths)


class EEGAdapter(nn.Module):
    """Per-attention-site trainable conditioning state plus the global lam."""

    def __init__(self, cfg: AdapterConfig):
        super().__init__()
        self.cfg = cfg
        self.lam = cfg.lam
        if cfg.injector == "film":
            self.projections = nn.ModuleList(
                FeatureProjection(cfg.embed_dim, cfg.hidden, w) for w in cfg.site_widths)
        elif cfg.injector == "xattn":
            self.eeg_keys = nn.ModuleList(
                nn.Linear(cfg.embed_dim, w, bias=False) for w in cfg.site_widths)
            self.eeg_values = nn.ModuleList(
                nn.Linear(cfg.embed_dim, w, bias=False) for w in cfg.site_widths)
            for lin in self.eeg_values:
                nn.init.zeros_(lin.weight)  # transparent at init, like FP
        # "direct" has no parameters

    def _check_site(self, site):
        if not 0 <= site < self.cfg.num_sites:
            raise ValueError(f"site {site} outside [0, {self.cfg.num_sites})")

    def feature_projection(self, site, c_e):
        """(alpha, beta) for one site; film injector only."""
        self._check_site(site)
        if self.cfg.injector != "film":
            raise ValueError(f"feature_projection undefined for {self.cfg.injector!r}")
        return self.projections[site](c_e)

    def param_count_per_site(self):
        if self.cfg.injector == "film":
            return [sum(p.numel() for p in fp.parameters()) for fp in self.projections]
        if self.cfg.injector == "xattn":
            return [sum(p.numel() for p in k.parameters()) + sum(p.numel() for p in v.parameters())
                    for k, v in zip(self.eeg_keys, self.eeg_values)]
        return [0] * self.cfg.num_sites

    def added_param_count(self):
        return sum(self.param_count_per_site())

    def sidecar_config(self):
        return {"sites": self.cfg.num_sites, "widths": list(self.cfg.site_widths),
                "lambda": self.lam, "injector_kind": self.cfg.injector,
                "param_count": self.added_param_count(),
                "embed_dim": self.cfg.embed_dim, "hidden": self.cfg.hidden}


def combined_conditioning(z, c_t, c_e, adapter, site, w_q, w_k, w_v, lam=None):
    """Eq.-style site output on pre-attention hidden states z.

    Text cross-attention plus lam-weighted FiLM of the same z. With lam = 0 or
    no adapter the output is exactly the text-only attention.
    """
    if adapter is not None and adapter.cfg.injector == "direct":
        context = c_e.unsqueeze(-2)  # EEG as the conditioning sequence
        if context.shape[-1] != w_k.shape[0]:
            raise ValueError("direct injection needs EEG dim == d_ctx")
        return cross_attention(z, context, w_q, w_k, w_v)
    attn = cross_attention(z, c_t, w_q, w_k, w_v)
    if adapter is None:
        return attn
    lam = adapter.lam if lam is None else lam
    if lam == 0.0:
        return attn
    if adapter.cfg.injector == "film":
        alpha, beta = adapter.feature_projection(site, c_e)
        return attn + lam * film_modulate(z, alpha, beta)
    # xattn: one-token EEG sequence through per-site key/value projections
    k_e = adapter.eeg_keys[site](c_e).unsqueeze(-2)
    v_e = adapter.eeg_values[site](c_e).unsqueeze(-2)
    q = z @ w_q
    logits = q @ k_e.transpose(-1, -2) / math.sqrt(q.shape[-1])
    return attn + lam * (torch.softmax(logits, dim=-1) @ v_e)


# ---------------------------------------------------------------------------
# condition dropout (classifier-free guidance training)

def drop_conditions(conds: ConditioningBundle, p_text, p_eeg, p_both,
                    rng: torch.Generator) -> ConditioningBundle:
    """Per item: with p_both null both, else p_text null text only, else
    p_eeg null EEG only, else unchanged."""
    for name, p in (("p_text", p_text), ("p_eeg", p_eeg), ("p_both", p_both)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name} must be in [0, 1], got {p}")
    if p_text + p_eeg + p_both > 1.0:
        raise ValueError("dropout probabilities sum above 1")
    u = torch.rand(conds.batch, generator=rng)
    drop_both = u < p_both
    drop_text = drop_both | ((u >= p_both) & (u < p_both + p_text))
    drop_eeg = drop_both | ((u >= p_both + p_text) & (u < p_both + p_text + p_eeg))
    text = torch.where(drop_text.reshape(-1, 1, 1), torch.zeros_like(conds.text_seq),
                       conds.text_seq)
    eeg = torch.where(drop_eeg.reshape(-1, 1), torch.zeros_like(conds.eeg_emb),
                      conds.eeg_emb)
    return ConditioningBundle(text, eeg)


# ---------------------------------------------------------------------------
# denoiser backbone

def sinusoidal_time_embedding(t, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32)
                      / max(half - 1, 1))
    args = t.to(torch.float32)[:, None] * freqs[None]
    return torch.cat([args.sin(), args.cos()], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, time_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(math.gcd(8, in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(math.gcd(8, out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        self.act = nn.SiLU()

    def forward(self, x, t_emb):
        h = self.conv1(self.act(self.norm1(x)))
        h = h + self.time_proj(self.act(t_emb))[:, :, None, None]
        h = self.conv2(self.act(self.norm2(h)))
        return h + self.skip(x)


class CrossAttentionSite(nn.Module):
    """One conditioning site: normalization, Eq.-form single-head attention
    weights, and a residual connection around the combined output."""

    def __init__(self, width, d_ctx):
        super().__init__()
        self.width = width
        self.norm = nn.LayerNorm(width)
        self.w_q = nn.Parameter(torch.randn(width, width) / math.sqrt(width))
        self.w_k = nn.Parameter(torch.randn(d_ctx, width) / math.sqrt(d_ctx))
        self.w_v = nn.Parameter(torch.randn(d_ctx, width) / math.sqrt(d_ctx))

    def forward(self, x, c_t, c_e, adapter, site_index, lam=None):
        # x: [B, C, H, W] feature map; tokens are spatial positions
        b, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        z = self.norm(tokens)
        z_new = combined_conditioning(z, c_t, c_e, adapter, site_index,
                                      self.w_q, self.w_k, self.w_v, lam)
        tokens = tokens + z_new
        return tokens.transpose(1, 2).reshape(b, c, h, w)


@dataclass
class DenoiserConfig:
    image_size: int = 32
    in_channels: int = 3
    base: int = 48
    d_ctx: int = 128
    time_dim: int = 128

    @property
    def site_widths(self):
        return (2 * self.base,) * 4


class UNetDenoiser(nn.Module):
    """Small text-conditional U-Net at 32x32 with four cross-attention sites
    (down-16, down-8, mid-8, up-16)."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        b, td = cfg.base, cfg.time_dim
        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        self.stem = nn.Conv2d(cfg.in_channels, b, 3, padding=1)
        self.res_in = ResBlock(b, b, td)
        self.down1 = nn.Conv2d(b, 2 * b, 3, stride=2, padding=1)
        self.res_d1 = ResBlock(2 * b, 2 * b, td)
        self.site0 = CrossAttentionSite(2 * b, cfg.d_ctx)
        self.down2 = nn.Conv2d(2 * b, 2 * b, 3, stride=2, padding=1)
        self.res_d2 = ResBlock(2 * b, 2 * b, td)
        self.site1 = CrossAttentionSite(2 * b, cfg.d_ctx)
        self.res_m1 = ResBlock(2 * b, 2 * b, td)
        self.site2 = CrossAttentionSite(2 * b, cfg.d_ctx)
        self.res_m2 = ResBlock(2 * b, 2 * b, td)
        self.up1 = nn.Upsample(scale_factor=2, mode="nearest")
        self.res_u1 = ResBlock(4 * b, 2 * b, td)
        self.site3 = CrossAttentionSite(2 * b, cfg.d_ctx)
        self.up2 = nn.Upsample(scale_factor=2, mode="nearest")
        self.res_u2 = ResBlock(3 * b, b, td)
        self.out_norm = nn.GroupNorm(math.gcd(8, b), b)
        self.out_conv = nn.Conv2d(b, cfg.in_channels, 3, padding=1)
        self.act = nn.SiLU()

    @property
    def num_sites(self):
        return 4

    def forward(self, x_t, t, conds: ConditioningBundle, adapter: EEGAdapter | None = None,
                lam=None):
        if x_t.ndim != 4 or x_t.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected [B, {self.cfg.in_channels}, H, W] input, "
                             f"got {tuple(x_t.shape)}")
        c_t, c_e = conds.text_seq, conds.eeg_emb
        t_emb = self.time_mlp(sinusoidal_time_embedding(t, self.cfg.time_dim))
        h1 = self.res_in(self.stem(x_t), t_emb)
        h2 = self.res_d1(self.down1(h1), t_emb)
        h2 = self.site0(h2, c_t, c_e, adapter, 0, lam)
        h3 = self.res_d2(self.down2(h2), t_emb)
        h3 = self.site1(h3, c_t, c_e, adapter, 1, lam)
        m = self.res_m1(h3, t_emb)
        m = self.site2(m, c_t, c_e, adapter, 2, lam)
        m = self.res_m2(m, t_emb)
        u1 = self.res_u1(torch.cat([self.up1(m), h2], dim=1), t_emb)
        u1 = self.site3(u1, c_t, c_e, adapter, 3, lam)
        u2 = self.res_u2(torch.cat([self.up2(u1), h1], dim=1), t_emb)
        return self.out_conv(self.act(self.out_norm(u2)))


def build_denoiser(cfg: DenoiserConfig, seed: int) -> UNetDenoiser:
    torch.manual_seed(seed % 2 ** 63)
    return UNetDenoiser(cfg)


def build_adapter(cfg: AdapterConfig, seed: int) -> EEGAdapter:
    torch.manual_seed(seed % 2 ** 63)
    return EEGAdapter(cfg)


# ---------------------------------------------------------------------------
# frozen EEG path and the full denoise op

class FrozenEEGPath:
    """Stage-1 EEG encoder, frozen; maps raw records to unit-norm embeddings."""

    def __init__(self, encoder: EEGEncoder):
        encoder.eval()
        for p in encoder.parameters():
            p.requires_grad_(False)
        self.encoder = encoder

    @property
    def out_dim(self):
        return self.encoder.cfg.out_dim

    def embed(self, eeg_batch: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return normalize(self.encoder(eeg_batch))

    def checksum(self):
        return weights_checksum(self.encoder)


def denoise(denoiser: UNetDenoiser, adapter, eeg_path: FrozenEEGPath,
            x_t, t, text_seq, eeg_raw=None, lam=None):
    """Full eps prediction: encodes raw EEG through the frozen path (or uses
    the null embedding) and runs the backbone with the adapter at every site."""
    b = x_t.shape[0]
    if eeg_raw is None:
        c_e = torch.zeros(b, eeg_path.out_dim, dtype=x_t.dtype)
    else:
        c_e = eeg_path.embed(torch.as_tensor(eeg_raw, dtype=torch.float32))
        if c_e.shape[0] != b:
            raise ValueError("EEG batch size does not match x_t")
    conds = ConditioningBundle(text_seq, c_e)
    return denoiser(x_t, t, conds, adapter, lam)
