"""Mask-based triple contrastive alignment of the EEG encoder (stage 1).

The loss couples EEG-image, EEG-text, and image-text pairs through symmetric
temperature-scaled InfoNCE terms; with all three terms enabled and equal
weights, the total equals the six-log-term sum normalized by 1/(6B). Only the
EEG encoder and the temperature are trainable; the reference encoders stay
frozen.
"""

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .encoders import (
    EEGEncoder, EEGEncoderConfig, ReferenceEncoders, make_mask, normalize,
    save_checkpoint, load_into, load_sidecar,
)
from .seeding import derive_seed, np_rng
from .synthworld import (
    DatasetManifest, Tokenizer, TripletBatch, caption_text, load_triplet_batch,
)

ALL_TERMS = ("EI", "ET", "IT")


def recaption(scenes, detail, vocab):
    """Re-derive captions from stored scenes at the requested detail level."""
    tokenizer = Tokenizer(vocab)
    return [tokenizer.caption(caption_text(s, detail, vocab)) for s in scenes]


def infonce_pair(a: torch.Tensor, b: torch.Tensor, tau) -> torch.Tensor:
    """Symmetric two-direction InfoNCE for one modality pair.

    Rows of a and b are unit-norm embeddings of matched pairs; returns
    -(1/2B) sum_i [log softmax_j(a_i.b_j/tau)[i] + log softmax_j(b_i.a_j/tau)[i]].
    """
    tau_value = float(tau) if not torch.is_tensor(tau) else float(tau.detach())
    if tau_value <= 0:
        raise ValueError(f"temperature must be positive, got {tau_value}")
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"expected matching [B, D] matrices, got {a.shape} vs {b.shape}")
    logits = a @ b.T / tau
    labels = torch.arange(a.shape[0], device=a.device)
    return 0.5 * (nn.functional.cross_entropy(logits, labels)
                  + nn.functional.cross_entropy(logits.T, labels))


def triple_contrastive_loss(f_eeg, f_img, f_txt, tau, terms=ALL_TERMS, weights=None):
    """Weighted mean of the selected pair terms; per-term values exposed.

    Equal weights over all three terms reproduce the 1/(6B)-normalized
    six-term sum exactly.
    """
    terms = tuple(terms)
    if not terms:
        raise ValueError("at least one loss term is required")
    unknown = set(terms) - set(ALL_TERMS)
    if unknown:
        raise ValueError(f"unknown loss terms: {sorted(unknown)}")
    if weights is None:
        weights = {t: 1.0 for t in terms}
    pairs = {"EI": (f_eeg, f_img), "ET": (f_eeg, f_txt), "IT": (f_img, f_txt)}
    per_term = {}
    total = None
    weight_sum = 0.0
    for t in terms:
        value = infonce_pair(*pairs[t], tau)
        per_term[t] = value
        w = float(weights.get(t, 1.0))
        total = value * w if total is None else total + value * w
        weight_sum += w
    return total / weight_sum, per_term


def check_unit_rows(mat, tol=1e-6):
    norms = mat.norm(dim=-1)
    if (norms - 1).abs().max() > tol:
        raise ValueError(f"rows are not unit-norm (max deviation "
                         f"{float((norms - 1).abs().max()):.2e})")


class Temperature(nn.Module):
    """Learnable temperature, log-parameterized and clamped to [1e-3, 10]."""

    def __init__(self, init=0.07):
        super().__init__()
        self.log_tau = nn.Parameter(torch.tensor(math.log(init)))

    @property
    def tau(self):
        return self.log_tau.exp().clamp(1e-3, 10.0)


# ---------------------------------------------------------------------------
# stage-1 training

@dataclass
class AlignConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.01
    mask_ratio: float = 0.5
    tau_init: float = 0.07
    terms: tuple = ALL_TERMS
    term_weights: dict = field(default_factory=dict)
    seed: int = 0
    # stage-1 text supervision mirrors class-label captions; the manifest's
    # stored (typically full-detail) captions are left for stage 2
    caption_detail: str = "object_only"
    encoder: EEGEncoderConfig = field(default_factory=EEGEncoderConfig)

    def to_dict(self):
        d = asdict(self)
        d["terms"] = list(self.terms)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "terms" in d:
            d["terms"] = tuple(d["terms"])
        if "encoder" in d and isinstance(d["encoder"], dict):
            d["encoder"] = EEGEncoderConfig(**d["encoder"])
        return cls(**d)


class AlignState:
    """Trainable stage-1 state: EEG encoder, temperature, optimizer, step."""

    def __init__(self, cfg: AlignConfig):
        self.cfg = cfg
        torch.manual_seed(derive_seed(cfg.seed, "align", "init") % 2 ** 63)
        self.encoder = EEGEncoder(cfg.encoder)
        self.temperature = Temperature(cfg.tau_init)
        decay, no_decay = [], []
        for name, p in self.encoder.named_parameters():
            (no_decay if p.ndim <= 1 else decay).append(p)
        self.optimizer = torch.optim.AdamW(
            [{"params": decay, "weight_decay": cfg.weight_decay},
             {"params": no_decay + [self.temperature.log_tau], "weight_decay": 0.0}],
            lr=cfg.lr)
        self.step = 0


def batch_tensors(batch: TripletBatch):
    eeg = torch.as_tensor(batch.eeg, dtype=torch.float32)
    img = torch.as_tensor(batch.images, dtype=torch.float32).permute(0, 3, 1, 2).contiguous()
    tokens = torch.as_tensor(np.stack([c.tokens for c in batch.captions]), dtype=torch.long)
    return eeg, img, tokens


def embed_batch(state_or_encoder, refs: ReferenceEncoders, eeg, img, tokens,
                eeg_mask=None, img_mask=None):
    encoder = state_or_encoder.encoder if isinstance(state_or_encoder, AlignState) \
        else state_or_encoder
    f_eeg = normalize(encoder(eeg, eeg_mask))
    with torch.no_grad():
        f_img = normalize(refs.image_encoder(img, img_mask))
        f_txt = normalize(refs.text_encoder(tokens)[0])
    return f_eeg, f_img, f_txt


def train_alignment_step(state: AlignState, batch: TripletBatch,
                         refs: ReferenceEncoders) -> dict:
    """One optimizer step on the EEG encoder and temperature.

    Fresh independent masks are drawn for the EEG and image branches each
    step; the reference encoders are never updated.
    """
    cfg = state.cfg
    eeg, img, tokens = batch_tensors(batch)
    eeg_mask = make_mask(state.encoder.cfg.num_patches, cfg.mask_ratio,
                         derive_seed(cfg.seed, "mask", "eeg", state.step))
    img_mask = make_mask(refs.image_encoder.cfg.num_patches, cfg.mask_ratio,
                         derive_seed(cfg.seed, "mask", "img", state.step))
    f_eeg, f_img, f_txt = embed_batch(state, refs, eeg, img, tokens, eeg_mask, img_mask)
    total, per_term = triple_contrastive_loss(
        f_eeg, f_img, f_txt, state.temperature.tau, cfg.terms, cfg.term_weights)
    if not torch.isfinite(total):
        raise RuntimeError(f"non-finite alignment loss at step {state.step}")
    state.optimizer.zero_grad()
    total.backward()
    state.optimizer.step()
    state.step += 1
    metrics = {"step": state.step, "loss": float(total.detach()),
               "tau": float(state.temperature.tau.detach())}
    for name, key in (("EI", "l_ei"), ("ET", "l_et"), ("IT", "l_it")):
        metrics[key] = float(per_term[name].detach()) if name in per_term else None
    return metrics


def train_alignment(manifest: DatasetManifest, refs: ReferenceEncoders,
                    cfg: AlignConfig, out_dir=None):
    """Full stage-1 loop over the train split; returns (state, history)."""
    state = AlignState(cfg)
    train_idx = manifest.indices_for_split("train")
    if not train_idx:
        raise ValueError("manifest has no train split")
    data = load_triplet_batch(manifest, train_idx)
    if cfg.caption_detail is not None:
        data.captions = recaption(data.scenes, cfg.caption_detail, manifest.vocab)
    ref_checksum = refs.checksum()

    log_f = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_f = open(out_dir / "metrics.jsonl", "w")
    history = []
    try:
        order = np_rng(derive_seed(cfg.seed, "align", "order"))
        for epoch in range(cfg.epochs):
            perm = order.permutation(len(train_idx))
            for start in range(0, len(train_idx), cfg.batch_size):
                sel = perm[start:start + cfg.batch_size]
                if sel.size < 2:
                    continue
                batch = TripletBatch(
                    eeg=data.eeg[sel], images=data.images[sel],
                    captions=[data.captions[i] for i in sel],
                    scenes=[data.scenes[i] for i in sel],
                    subject_ids=[data.subject_ids[i] for i in sel])
                metrics = train_alignment_step(state, batch, refs)
                history.append(metrics)
                if log_f:
                    log_f.write(json.dumps(metrics) + "\n")
    finally:
        if log_f:
            log_f.close()
    if refs.checksum() != ref_checksum:
        raise RuntimeError("reference encoders changed during alignment training")
    if out_dir is not None:
        save_alignment(state, out_dir)
    return state, history


def save_alignment(state: AlignState, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state.encoder, out_dir / "eeg_encoder.pt",
                    asdict(state.cfg.encoder),
                    extra={"tau": float(state.temperature.tau.detach()),
                           "align_config": state.cfg.to_dict(),
                           "steps": state.step})


def load_alignment_encoder(out_dir) -> EEGEncoder:
    out_dir = Path(out_dir)
    cfg = EEGEncoderConfig(**load_sidecar(out_dir / "eeg_encoder.pt")["config"])
    encoder = EEGEncoder(cfg)
    load_into(encoder, out_dir / "eeg_encoder.pt")
    encoder.eval()
    for p in encoder.parameters():
        p.requires_grad_(False)
    return encoder


# ---------------------------------------------------------------------------
# retrieval probe

def retrieval_eval(f_eeg, f_img, labels) -> dict:
    """Rank image rows by cosine for each EEG row.

    instance_top1: fraction whose own image ranks first;
    class_top1: fraction whose top image shares the class label.
    """
    if f_eeg.shape[0] < 2:
        raise ValueError("retrieval needs at least 2 rows")
    labels = np.asarray(labels)
    sims = f_eeg @ f_img.T
    top = sims.argmax(dim=1).cpu().numpy()
    instance = float(np.mean(top == np.arange(len(top))))
    cls = float(np.mean(labels[top] == labels))
    return {"instance_top1": instance, "class_top1": cls}


def embed_split(manifest: DatasetManifest, encoder: EEGEncoder,
                refs: ReferenceEncoders, split: str):
    """Unmasked, normalized EEG and image embeddings plus class labels."""
    idx = manifest.indices_for_split(split)
    if not idx:
        raise ValueError(f"manifest has no {split!r} split")
    batch = load_triplet_batch(manifest, idx)
    eeg, img, _ = batch_tensors(batch)
    with torch.no_grad():
        f_eeg = normalize(encoder(eeg))
        f_img = normalize(refs.image_encoder(img))
    return f_eeg, f_img, batch.class_ids
