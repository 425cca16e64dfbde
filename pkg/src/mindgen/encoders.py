"""EEG, image, and text encoders over a shared embedding space.

The EEG encoder is the only trainable encoder in stage 1. The image and
text encoders are bootstrapped once by image-text contrastive training on
the synthetic corpus and then frozen; they play the role of a fixed,
semantically structured reference space.

Masking is FLIP-style: a random subset of patch tokens is dropped after
the patch embedding, before the transformer.
"""

import hashlib
import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .seeding import derive_seed, np_rng
from .synthworld import (
    CAPTION_DETAILS, MAX_CAPTION_TOKENS, SceneSpec, Tokenizer, Vocabulary,
    caption_text, render_image,
)

EMBED_DIM = 128  # desk-scale shared embedding dimension (paper scale: 1280)


# ---------------------------------------------------------------------------
# basic ops

def normalize(e: torch.Tensor) -> torch.Tensor:
    """L2-normalize along the last axis; zero vectors are rejected."""
    norm = e.norm(dim=-1, keepdim=True)
    if (norm == 0).any():
        raise ValueError("cannot normalize a zero vector")
    return e / norm


@dataclass
class PatchSequence:
    tokens: np.ndarray     # [num_patches, token_dim]
    positions: np.ndarray  # strictly increasing patch indices


def patchify_eeg(samples: np.ndarray, patch_len: int) -> PatchSequence:
    """Split [channels, timesteps] into non-overlapping time patches.

    Token t covers timesteps [t*patch_len, (t+1)*patch_len) of every
    channel; token_dim = channels * patch_len, channel-major layout.
    """
    channels, timesteps = samples.shape
    if timesteps % patch_len != 0:
        raise ValueError(f"timesteps ({timesteps}) must be divisible by patch_len "
                         f"({patch_len})")
    num = timesteps // patch_len
    tokens = (samples.reshape(channels, num, patch_len)
              .transpose(1, 0, 2)
              .reshape(num, channels * patch_len))
    return PatchSequence(tokens=tokens.copy(), positions=np.arange(num))


def unpatchify_eeg(seq: PatchSequence, channels: int, patch_len: int) -> np.ndarray:
    num = seq.tokens.shape[0]
    return (seq.tokens.reshape(num, channels, patch_len)
            .transpose(1, 0, 2)
            .reshape(channels, num * patch_len))


@dataclass
class MaskPlan:
    keep_indices: np.ndarray
    ratio: float
    seed: int


def make_mask(num_patches: int, ratio: float, seed: int) -> MaskPlan:
    """Uniform random subset of patch indices to keep; deterministic in seed."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must be in [0, 1), got {ratio}")
    keep = int(round((1.0 - ratio) * num_patches))
    if keep <= 0:
        raise ValueError(f"mask ratio {ratio} keeps no tokens out of {num_patches}")
    rng = np_rng(derive_seed(seed, "mask", num_patches))
    idx = np.sort(rng.choice(num_patches, size=keep, replace=False))
    return MaskPlan(keep_indices=idx.astype(np.int64), ratio=ratio, seed=seed)


def standardize_channels(x: torch.Tensor, eps=1e-6) -> torch.Tensor:
    """Zero mean, unit variance per channel per record (last axis = time)."""
    mean = x.mean(dim=-1, keepdim=True)
    std = x.std(dim=-1, keepdim=True, correction=0)
    return (x - mean) / (std + eps)


# ---------------------------------------------------------------------------
# transformer building blocks

class TransformerBlock(nn.Module):
    def __init__(self, width, heads, mlp_ratio=4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(width)
        hidden = int(width * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(),
                                 nn.Linear(hidden, width))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        x = x + self.mlp(self.norm2(x))
        return x


class _TokenTransformer(nn.Module):
    """Shared trunk: [B, P, width] tokens -> class-token feature."""

    def __init__(self, num_patches, width, depth, heads):
        super().__init__()
        # O(0.1-1) init keeps the class token well-conditioned through LayerNorm
        self.cls_token = nn.Parameter(torch.randn(1, 1, width) * 0.5)
        self.pos_embed = nn.Parameter(torch.randn(1, num_patches, width) * 0.1)
        self.blocks = nn.ModuleList(TransformerBlock(width, heads) for _ in range(depth))
        self.norm = nn.LayerNorm(width)

    def forward(self, tokens, keep_indices=None):
        x = tokens + self.pos_embed
        if keep_indices is not None:
            x = x.index_select(1, keep_indices)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x[:, 0])


def _as_keep_tensor(mask, num_patches, device):
    if mask is None:
        return None
    idx = np.asarray(mask.keep_indices)
    if idx.size == num_patches and np.array_equal(idx, np.arange(num_patches)):
        return None  # full keep is exactly the unmasked path
    return torch.as_tensor(idx, dtype=torch.long, device=device)


# ---------------------------------------------------------------------------
# EEG encoder (trainable, stage 1)

@dataclass
class EEGEncoderConfig:
    channels: int = 128
    timesteps: int = 512
    patch_len: int = 16
    width: int = 128
    depth: int = 4
    heads: int = 4
    out_dim: int = EMBED_DIM

    @property
    def num_patches(self):
        return self.timesteps // self.patch_len


class EEGEncoder(nn.Module):
    """ViT-style encoder over EEG time patches; output is NOT normalized."""

    def __init__(self, cfg: EEGEncoderConfig):
        super().__init__()
        if cfg.timesteps % cfg.patch_len != 0:
            raise ValueError("timesteps must be divisible by patch_len")
        self.cfg = cfg
        self.patch_embed = nn.Linear(cfg.channels * cfg.patch_len, cfg.width)
        self.trunk = _TokenTransformer(cfg.num_patches, cfg.width, cfg.depth, cfg.heads)
        self.proj = nn.Linear(cfg.width, cfg.out_dim)

    def forward(self, x, mask: MaskPlan | None = None):
        # x: [B, channels, timesteps]
        cfg = self.cfg
        if x.ndim != 3 or x.shape[1] != cfg.channels or x.shape[2] != cfg.timesteps:
            raise ValueError(f"expected EEG batch [B, {cfg.channels}, {cfg.timesteps}], "
                             f"got {tuple(x.shape)}")
        x = standardize_channels(x)
        b = x.shape[0]
        tokens = (x.reshape(b, cfg.channels, cfg.num_patches, cfg.patch_len)
                  .permute(0, 2, 1, 3)
                  .reshape(b, cfg.num_patches, cfg.channels * cfg.patch_len))
        tokens = self.patch_embed(tokens)
        keep = _as_keep_tensor(mask, cfg.num_patches, tokens.device)
        return self.proj(self.trunk(tokens, keep))


# ---------------------------------------------------------------------------
# frozen reference encoders

@dataclass
class ImageEncoderConfig:
    image_size: int = 32
    patch: int = 4  # token footprint in pixels; must be a power of two
    width: int = 128
    depth: int = 2
    heads: int = 4
    out_dim: int = EMBED_DIM

    @property
    def num_patches(self):
        return (self.image_size // self.patch) ** 2


def _groups_for(channels):
    return math.gcd(8, channels)


class ImageEncoder(nn.Module):
    """Conv-stem patch transformer: the stem embeds each patch-sized footprint
    into one token; masked tokens are dropped before the transformer."""

    def __init__(self, cfg: ImageEncoderConfig):
        super().__init__()
        stages = int(round(math.log2(cfg.patch)))
        if 2 ** stages != cfg.patch or cfg.patch < 2:
            raise ValueError("patch must be a power of two >= 2")
        if cfg.image_size % cfg.patch != 0:
            raise ValueError("image_size must be divisible by patch")
        self.cfg = cfg
        layers = []
        in_c = 3
        for s in range(stages):
            out_c = max(8, cfg.width >> (stages - s))
            layers += [nn.Conv2d(in_c, out_c, 3, 1, 1),
                       nn.GroupNorm(_groups_for(out_c), out_c), nn.GELU(),
                       nn.MaxPool2d(2)]
            in_c = out_c
        layers += [nn.Conv2d(in_c, cfg.width, 3, 1, 1),
                   nn.GroupNorm(_groups_for(cfg.width), cfg.width), nn.GELU()]
        self.stem = nn.Sequential(*layers)
        self.trunk = _TokenTransformer(cfg.num_patches, cfg.width, cfg.depth, cfg.heads)
        self.proj = nn.Linear(cfg.width, cfg.out_dim)

    def forward(self, img, mask: MaskPlan | None = None):
        # img: [B, 3, H, W] in [-1, 1]
        cfg = self.cfg
        s = cfg.image_size
        if img.ndim != 4 or img.shape[1] != 3 or img.shape[2] != s or img.shape[3] != s:
            raise ValueError(f"expected image batch [B, 3, {s}, {s}], got {tuple(img.shape)}")
        tokens = self.stem(img).flatten(2).transpose(1, 2)  # [B, P, width]
        keep = _as_keep_tensor(mask, cfg.num_patches, tokens.device)
        return self.proj(self.trunk(tokens, keep))


@dataclass
class TextEncoderConfig:
    vocab_size: int = 32
    max_len: int = MAX_CAPTION_TOKENS
    d_ctx: int = 128
    depth: int = 2
    heads: int = 4
    out_dim: int = EMBED_DIM
    pad_id: int = 0


class TextEncoder(nn.Module):
    """Token transformer: pooled embedding for contrastive alignment plus the
    per-token sequence used for cross-attention conditioning.

    Padded positions are zeroed in the sequence output, so an all-padding
    caption yields the all-zeros null text sequence.
    """

    def __init__(self, cfg: TextEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.token_embed = nn.Embedding(cfg.vocab_size, cfg.d_ctx, padding_idx=cfg.pad_id)
        self.pos_embed = nn.Parameter(torch.randn(1, cfg.max_len, cfg.d_ctx) * 0.02)
        self.blocks = nn.ModuleList(TransformerBlock(cfg.d_ctx, cfg.heads)
                                    for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.d_ctx)
        self.proj = nn.Linear(cfg.d_ctx, cfg.out_dim)

    def forward(self, tokens):
        # tokens: [B, L] int64
        cfg = self.cfg
        if tokens.ndim != 2 or tokens.shape[1] != cfg.max_len:
            raise ValueError(f"expected token batch [B, {cfg.max_len}], got {tuple(tokens.shape)}")
        if (tokens < 0).any() or (tokens >= cfg.vocab_size).any():
            raise ValueError("token id outside vocabulary")
        x = self.token_embed(tokens) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)
        nonpad = (tokens != cfg.pad_id).to(x.dtype).unsqueeze(-1)
        seq = x * nonpad
        pooled = seq.sum(dim=1) / nonpad.sum(dim=1).clamp(min=1.0)
        return self.proj(pooled), seq


class ReferenceEncoders:
    """Frozen image + text encoders defining the shared reference space."""

    def __init__(self, image_encoder: ImageEncoder, text_encoder: TextEncoder,
                 tokenizer: Tokenizer, frozen=False):
        self.image_encoder = image_encoder
        self.text_encoder = text_encoder
        self.tokenizer = tokenizer
        self.frozen = frozen
        if frozen:
            self.freeze()

    def freeze(self):
        for module in (self.image_encoder, self.text_encoder):
            module.eval()
            for p in module.parameters():
                p.requires_grad_(False)
        self.frozen = True

    def checksum(self):
        h = hashlib.blake2b(digest_size=16)
        for module in (self.image_encoder, self.text_encoder):
            h.update(weights_checksum(module).encode())
        return h.hexdigest()

    def encode_image(self, img, mask: MaskPlan | None = None):
        with torch.no_grad():
            return self.image_encoder(img, mask)

    def encode_text(self, tokens):
        with torch.no_grad():
            return self.text_encoder(tokens)


# ---------------------------------------------------------------------------
# spec-level single-record ops (batch forms live on the modules)

def _to_tensor(x):
    return torch.as_tensor(np.ascontiguousarray(x), dtype=torch.float32)


def encode_eeg(encoder: EEGEncoder, record, mask: MaskPlan | None = None) -> torch.Tensor:
    return encoder(_to_tensor(record.samples).unsqueeze(0), mask).squeeze(0)


def encode_image_ref(refs: ReferenceEncoders, image_hwc, mask: MaskPlan | None = None):
    img = _to_tensor(image_hwc).permute(2, 0, 1).unsqueeze(0)
    return refs.encode_image(img, mask).squeeze(0)


def encode_text_ref(refs: ReferenceEncoders, cap):
    tokens = torch.as_tensor(cap.tokens, dtype=torch.long).unsqueeze(0)
    pooled, seq = refs.encode_text(tokens)
    return pooled.squeeze(0), seq.squeeze(0)


# ---------------------------------------------------------------------------
# checkpoints

def weights_checksum(module: nn.Module) -> str:
    """Content hash of all parameters and buffers, order-independent."""
    h = hashlib.blake2b(digest_size=16)
    state = module.state_dict()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def save_checkpoint(module: nn.Module, path, config: dict, extra: dict | None = None):
    """Write weights plus a JSON sidecar (config, param count, checksum)."""
    path = Path(path)
    torch.save(module.state_dict(), path)
    sidecar = {
        "config": config,
        "param_count": param_count(module),
        "checksum": weights_checksum(module),
    }
    if extra:
        sidecar.update(extra)
    with open(path.with_suffix(".json"), "w") as f:
        json.dump(sidecar, f, indent=1)


def load_sidecar(path) -> dict:
    with open(Path(path).with_suffix(".json")) as f:
        return json.load(f)


def load_into(module: nn.Module, path, verify=True) -> dict:
    state = torch.load(path, map_location="cpu", weights_only=True)
    module.load_state_dict(state)
    sidecar = load_sidecar(path)
    if verify and sidecar.get("checksum") != weights_checksum(module):
        raise ValueError(f"checkpoint checksum mismatch for {path}")
    return sidecar


# ---------------------------------------------------------------------------
# reference-encoder bootstrap

@dataclass
class BootstrapConfig:
    pairs: int = 2000
    holdout: int = 512
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 0.01
    max_epochs: int = 40
    target_top1: float = 0.95
    mask_ratio: float = 0.5
    image_size: int = 32
    # "mixed" samples a detail level per pair so every caption form the
    # pipeline uses (class-only through full) embeds meaningfully
    train_caption_detail: str = "mixed"
    eval_caption_detail: str = "full"
    tau_init: float = 0.07


def _sample_scenes(vocab, n, rng):
    return [SceneSpec(class_id=int(rng.integers(vocab.num_classes)),
                      color_id=int(rng.integers(vocab.num_colors)),
                      background_id=int(rng.integers(vocab.num_backgrounds)),
                      pose_seed=int(rng.integers(2 ** 63)))
            for _ in range(n)]


def _scene_tensors(scenes, vocab, tokenizer, image_size, detail, rng=None):
    imgs = np.stack([render_image(s, image_size) for s in scenes])
    if detail == "mixed":
        details = [CAPTION_DETAILS[int(rng.integers(len(CAPTION_DETAILS)))]
                   for _ in scenes]
    else:
        details = [detail] * len(scenes)
    texts = [caption_text(s, d, vocab) for s, d in zip(scenes, details)]
    tokens = np.stack([tokenizer.encode(t) for t in texts])
    img_t = torch.as_tensor(imgs).permute(0, 3, 1, 2).contiguous()
    tok_t = torch.as_tensor(tokens, dtype=torch.long)
    return img_t, tok_t, texts


def _image_to_text_top1(img_emb, txt_emb, texts):
    sims = img_emb @ txt_emb.T
    top = sims.argmax(dim=1)
    return float(np.mean([texts[int(top[i])] == texts[i] for i in range(len(texts))]))


def bootstrap_reference_encoders(vocab: Vocabulary, cfg: BootstrapConfig, seed: int,
                                 image_cfg: ImageEncoderConfig | None = None,
                                 text_cfg: TextEncoderConfig | None = None):
    """Train the reference image/text encoders by image-text contrastive
    learning on a fresh synthetic corpus, then freeze them.

    Training applies the same patch masking to images that stage 1 uses, so
    masked-image embeddings stay meaningful. Stops once held-out image-to-text
    retrieval top-1 reaches the target; raises if it never does.
    """
    tokenizer = Tokenizer(vocab)
    image_cfg = image_cfg or ImageEncoderConfig(image_size=cfg.image_size)
    text_cfg = text_cfg or TextEncoderConfig(vocab_size=tokenizer.vocab_size)
    if image_cfg.out_dim != text_cfg.out_dim:
        raise ValueError("image and text encoders must share out_dim")

    torch.manual_seed(derive_seed(seed, "bootstrap", "init") % 2 ** 63)
    image_encoder = ImageEncoder(image_cfg)
    text_encoder = TextEncoder(text_cfg)
    log_tau = nn.Parameter(torch.tensor(math.log(cfg.tau_init)))

    rng = np_rng(derive_seed(seed, "bootstrap", "scenes"))
    train_scenes = _sample_scenes(vocab, cfg.pairs, rng)
    hold_scenes = _sample_scenes(vocab, cfg.holdout, rng)
    tr_img, tr_tok, _ = _scene_tensors(train_scenes, vocab, tokenizer,
                                       cfg.image_size, cfg.train_caption_detail, rng)
    ho_img, ho_tok, ho_txt = _scene_tensors(hold_scenes, vocab, tokenizer,
                                            cfg.image_size, cfg.eval_caption_detail)

    params = (list(image_encoder.parameters()) + list(text_encoder.parameters()))
    opt = torch.optim.AdamW([{"params": params, "weight_decay": cfg.weight_decay},
                             {"params": [log_tau], "weight_decay": 0.0}], lr=cfg.lr)
    order_gen = np_rng(derive_seed(seed, "bootstrap", "order"))
    history = []
    step = 0
    for epoch in range(cfg.max_epochs):
        perm = order_gen.permutation(cfg.pairs)
        for start in range(0, cfg.pairs, cfg.batch_size):
            idx = torch.as_tensor(perm[start:start + cfg.batch_size], dtype=torch.long)
            if idx.numel() < 2:
                continue
            mask = make_mask(image_cfg.num_patches, cfg.mask_ratio,
                             derive_seed(seed, "bootstrap", "mask", step))
            fi = normalize(image_encoder(tr_img[idx], mask))
            ft = normalize(text_encoder(tr_tok[idx])[0])
            tau = log_tau.exp().clamp(1e-3, 10.0)
            logits = fi @ ft.T / tau
            labels = torch.arange(idx.numel())
            loss = 0.5 * (nn.functional.cross_entropy(logits, labels)
                          + nn.functional.cross_entropy(logits.T, labels))
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
        with torch.no_grad():
            fi = normalize(image_encoder(ho_img))
            ft = normalize(text_encoder(ho_tok)[0])
        top1 = _image_to_text_top1(fi, ft, ho_txt)
        history.append({"epoch": epoch, "holdout_image_to_text_top1": top1,
                        "loss": float(loss.detach())})
        if top1 >= cfg.target_top1:
            break
    else:
        raise RuntimeError(
            f"reference-encoder bootstrap failed to reach top-1 {cfg.target_top1} "
            f"within {cfg.max_epochs} epochs (best {max(h['holdout_image_to_text_top1'] for h in history):.3f})")

    refs = ReferenceEncoders(image_encoder, text_encoder, tokenizer, frozen=True)
    report = {
        "epochs": len(history),
        "holdout_image_to_text_top1": history[-1]["holdout_image_to_text_top1"],
        "checksum": refs.checksum(),
        "history": history,
        "image_config": asdict(image_cfg),
        "text_config": asdict(text_cfg),
    }
    return refs, report


def save_reference_encoders(refs: ReferenceEncoders, directory, report=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_checkpoint(refs.image_encoder, directory / "ref_image.pt",
                    asdict(refs.image_encoder.cfg))
    save_checkpoint(refs.text_encoder, directory / "ref_text.pt",
                    asdict(refs.text_encoder.cfg),
                    extra={"combined_checksum": refs.checksum()})
    if report is not None:
        with open(directory / "bootstrap_report.json", "w") as f:
            json.dump(report, f, indent=1)


def load_reference_encoders(directory, vocab: Vocabulary) -> ReferenceEncoders:
    directory = Path(directory)
    image_cfg = ImageEncoderConfig(**load_sidecar(directory / "ref_image.pt")["config"])
    text_cfg = TextEncoderConfig(**load_sidecar(directory / "ref_text.pt")["config"])
    image_encoder = ImageEncoder(image_cfg)
    text_encoder = TextEncoder(text_cfg)
    load_into(image_encoder, directory / "ref_image.pt")
    load_into(text_encoder, directory / "ref_text.pt")
    return ReferenceEncoders(image_encoder, text_encoder, Tokenizer(vocab), frozen=True)
