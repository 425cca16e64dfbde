"""Stage-2 training: text-only backbone warm-up, then adapter-only training
with classifier-free condition dropout. Also the oracle image classifier
used by the evaluation metrics (never sharing parameters with generation).
"""

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from ..alignment import train_alignment
from ..conditioning import (
    AdapterConfig, EEGAdapter, FrozenEEGPath, UNetDenoiser, build_adapter,
    build_denoiser, drop_conditions,
)
from ..diffusion import ConditioningBundle, NoiseSchedule, ddpm_loss, make_schedule
from ..encoders import (
    ReferenceEncoders, bootstrap_reference_encoders, save_reference_encoders,
    weights_checksum,
)
from ..seeding import derive_seed, np_rng, torch_gen
from ..synthworld import (
    DatasetManifest, Tokenizer, TripletBatch, build_dataset, load_triplet_batch,
)
from .config import RunConfig, Stage2Config
from .models import ModelBundle


# ---------------------------------------------------------------------------
# oracle classifier (evaluation only)

class OracleClassifier(nn.Module):
    """Small convnet trained on rendered images to predict class ids."""

    def __init__(self, num_classes, image_size=32):
        super().__init__()
        self.num_classes = num_classes
        self.image_size = image_size
        self.features = nn.Sequential(
            nn.Conv2d(3, 32, 3, padding=1), nn.BatchNorm2d(32), nn.GELU(),
            nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1), nn.BatchNorm2d(64), nn.GELU(),
            nn.MaxPool2d(2),
            nn.Conv2d(64, 128, 3, padding=1), nn.BatchNorm2d(128), nn.GELU(),
            nn.AdaptiveAvgPool2d(1),
        )
        self.head = nn.Linear(128, num_classes)

    def forward(self, images):
        # images: [B, 3, H, W] in [-1, 1]
        return self.head(self.features(images).flatten(1))

    def predict(self, images):
        self.eval()
        with torch.no_grad():
            return self(images).argmax(dim=1)


def _split_images(manifest, split):
    idx = manifest.indices_for_split(split)
    batch = load_triplet_batch(manifest, idx)
    images = torch.as_tensor(batch.images).permute(0, 3, 1, 2).contiguous()
    return images, torch.as_tensor(batch.class_ids)


def _augmented_renders(manifest, rng, per_record):
    """Fresh renders of train-split classes under new pose/color/background.

    Labels are class ids, so re-rendering nuisance attributes enlarges the
    oracle's training set without touching held-out records.
    """
    from ..synthworld import SceneSpec, render_image

    vocab = manifest.vocab
    images, labels = [], []
    for i in manifest.indices_for_split("train"):
        cls = manifest.records[i].scene.class_id
        for _ in range(per_record):
            scene = SceneSpec(cls, int(rng.integers(vocab.num_colors)),
                              int(rng.integers(vocab.num_backgrounds)),
                              int(rng.integers(2 ** 60)))
            images.append(render_image(scene))
            labels.append(cls)
    x = torch.as_tensor(np.stack(images)).permute(0, 3, 1, 2).contiguous()
    return x, torch.as_tensor(labels)


def train_oracle_classifier(manifest: DatasetManifest, seed=0, epochs=12,
                            batch_size=64, lr=1e-3, augment_per_record=4,
                            min_val_accuracy=0.95) -> tuple[OracleClassifier, dict]:
    """Train and freeze the evaluation classifier; abort below the accuracy gate."""
    train_x, train_y = _split_images(manifest, "train")
    if augment_per_record > 0:
        aug_x, aug_y = _augmented_renders(
            manifest, np_rng(derive_seed(seed, "oracle", "augment")), augment_per_record)
        train_x = torch.cat([train_x, aug_x])
        train_y = torch.cat([train_y, aug_y])
    val_split = "val" if manifest.indices_for_split("val") else "test"
    val_x, val_y = _split_images(manifest, val_split)
    torch.manual_seed(derive_seed(seed, "oracle", "init") % 2 ** 63)
    model = OracleClassifier(manifest.vocab.num_classes)
    opt = torch.optim.AdamW(model.parameters(), lr=lr)
    order = np_rng(derive_seed(seed, "oracle", "order"))
    val_acc = 0.0
    for epoch in range(epochs):
        model.train()
        perm = order.permutation(train_x.shape[0])
        for start in range(0, len(perm), batch_size):
            sel = torch.as_tensor(perm[start:start + batch_size])
            loss = nn.functional.cross_entropy(model(train_x[sel]), train_y[sel])
            opt.zero_grad()
            loss.backward()
            opt.step()
        val_acc = float((model.predict(val_x) == val_y).float().mean())
        if val_acc >= 0.999:
            break
    if val_acc < min_val_accuracy:
        raise RuntimeError(
            f"oracle classifier reached only {val_acc:.3f} validation accuracy "
            f"(< {min_val_accuracy}); evaluation would be meaningless")
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    report = {"val_accuracy": val_acc, "val_split": val_split,
              "checksum": weights_checksum(model)}
    return model, report


# ---------------------------------------------------------------------------
# stage-2 phase 0: text-only warm-up (the "pretrained" backbone)

def encode_text_batch(refs: ReferenceEncoders, captions):
    tokens = torch.as_tensor(np.stack([c.tokens for c in captions]), dtype=torch.long)
    with torch.no_grad():
        _, seq = refs.text_encoder(tokens)
    return seq


def warmup_text_backbone(manifest: DatasetManifest, refs: ReferenceEncoders,
                         denoiser: UNetDenoiser, schedule: NoiseSchedule,
                         cfg: Stage2Config, seed, log_path=None) -> list:
    """Train the backbone as a plain text-to-image model with text dropout."""
    idx = manifest.indices_for_split("train")
    data = load_triplet_batch(manifest, idx)
    images = torch.as_tensor(data.images).permute(0, 3, 1, 2).contiguous()
    text_seq = encode_text_batch(refs, data.captions)

    opt = torch.optim.AdamW(denoiser.parameters(), lr=cfg.warmup_lr,
                            weight_decay=cfg.weight_decay)
    rng = torch_gen(derive_seed(seed, "warmup", "objective"))
    drop_rng = torch_gen(derive_seed(seed, "warmup", "dropout"))
    order = np_rng(derive_seed(seed, "warmup", "order"))
    denoiser.train()
    history = []
    log_f = open(log_path, "w") if log_path else None
    step = 0
    try:
        while step < cfg.warmup_steps:
            perm = order.permutation(len(idx))
            for start in range(0, len(perm), cfg.warmup_batch_size):
                if step >= cfg.warmup_steps:
                    break
                sel = torch.as_tensor(perm[start:start + cfg.warmup_batch_size])
                seq = text_seq[sel]
                drop = torch.rand(sel.numel(), generator=drop_rng) < cfg.warmup_text_dropout
                seq = torch.where(drop.reshape(-1, 1, 1), torch.zeros_like(seq), seq)
                # EEG slot unused during warm-up (no adapter attached)
                conds = ConditioningBundle(seq, torch.zeros(sel.numel(), 1))
                loss = ddpm_loss(lambda x, t, c: denoiser(x, t, c), schedule,
                                 images[sel], conds, rng)
                opt.zero_grad()
                loss.backward()
                opt.step()
                step += 1
                entry = {"step": step, "loss": float(loss.detach())}
                history.append(entry)
                if log_f:
                    log_f.write(json.dumps(entry) + "\n")
    finally:
        if log_f:
            log_f.close()
    denoiser.eval()
    return history


# ---------------------------------------------------------------------------
# stage-2 adapter training

class AdapterTrainState:
    """Adapter parameters, optimizer, frozen components, and RNG streams."""

    def __init__(self, denoiser: UNetDenoiser, adapter: EEGAdapter,
                 eeg_path: FrozenEEGPath, refs: ReferenceEncoders,
                 schedule: NoiseSchedule, cfg: Stage2Config, seed=0):
        self.denoiser = denoiser
        self.adapter = adapter
        self.eeg_path = eeg_path
        self.refs = refs
        self.schedule = schedule
        self.cfg = cfg
        self.seed = seed
        self.step = 0
        params = [{"params": list(adapter.parameters()),
                   "weight_decay": cfg.weight_decay}]
        if cfg.train_backbone:
            params.append({"params": list(denoiser.parameters()),
                           "weight_decay": cfg.weight_decay})
        else:
            for p in denoiser.parameters():
                p.requires_grad_(False)
        self.optimizer = torch.optim.AdamW(params, lr=cfg.lr)
        self.objective_rng = torch_gen(derive_seed(seed, "stage2", "objective"))
        self.dropout_rng = torch_gen(derive_seed(seed, "stage2", "dropout"))

    def denoise_fn(self):
        adapter, lam = self.adapter, self.cfg.lam

        def fn(x_t, t, conds):
            return self.denoiser(x_t.to(torch.float32), t, conds, adapter, lam)

        return fn


def adapter_step_tensors(state: AdapterTrainState, x0, text_seq, eeg_emb) -> dict:
    """Core stage-2 step on precomputed conditioning tensors."""
    cfg = state.cfg
    conds = drop_conditions(ConditioningBundle(text_seq, eeg_emb),
                            cfg.p_text, cfg.p_eeg, cfg.p_both, state.dropout_rng)
    loss = ddpm_loss(state.denoise_fn(), state.schedule, x0, conds,
                     state.objective_rng)
    if not torch.isfinite(loss):
        raise RuntimeError(f"non-finite stage-2 loss at step {state.step}; "
                           f"lam={cfg.lam} lr={cfg.lr}")
    state.optimizer.zero_grad()
    loss.backward()
    grad_sq = 0.0
    for p in state.adapter.parameters():
        if p.grad is not None:
            grad_sq += float(p.grad.pow(2).sum())
    state.optimizer.step()
    state.step += 1
    return {"step": state.step, "loss": float(loss.detach()),
            "grad_norm": math.sqrt(grad_sq)}


def train_adapter_step(state: AdapterTrainState, batch: TripletBatch) -> dict:
    """Spec-level step: encodes the raw triplet batch, then one update."""
    x0 = torch.as_tensor(batch.images).permute(0, 3, 1, 2).contiguous()
    text_seq = encode_text_batch(state.refs, batch.captions)
    eeg_emb = state.eeg_path.embed(torch.as_tensor(batch.eeg))
    return adapter_step_tensors(state, x0, text_seq, eeg_emb)


def train_adapter(state: AdapterTrainState, manifest: DatasetManifest,
                  log_path=None) -> list:
    """Run cfg.adapter_steps updates over the train split (embeddings cached;
    the frozen encoders make per-record conditioning constant)."""
    idx = manifest.indices_for_split("train")
    data = load_triplet_batch(manifest, idx)
    images = torch.as_tensor(data.images).permute(0, 3, 1, 2).contiguous()
    text_seq = encode_text_batch(state.refs, data.captions)
    eeg_emb = state.eeg_path.embed(torch.as_tensor(data.eeg))
    eeg_checksum = state.eeg_path.checksum()

    order = np_rng(derive_seed(state.seed, "stage2", "order"))
    history = []
    log_f = open(log_path, "w") if log_path else None
    try:
        while state.step < state.cfg.adapter_steps:
            perm = order.permutation(len(idx))
            for start in range(0, len(perm), state.cfg.batch_size):
                if state.step >= state.cfg.adapter_steps:
                    break
                sel = torch.as_tensor(perm[start:start + state.cfg.batch_size])
                metrics = adapter_step_tensors(state, images[sel], text_seq[sel],
                                               eeg_emb[sel])
                history.append(metrics)
                if log_f:
                    log_f.write(json.dumps(metrics) + "\n")
    finally:
        if log_f:
            log_f.close()
    if state.eeg_path.checksum() != eeg_checksum:
        raise RuntimeError("frozen EEG encoder changed during adapter training")
    return history


# ---------------------------------------------------------------------------
# full pipeline orchestration

def prepare_reference_encoders(cfg: RunConfig, out_dir=None):
    refs, report = bootstrap_reference_encoders(cfg.dataset.vocab, cfg.bootstrap,
                                                derive_seed(cfg.seed, "bootstrap"))
    if out_dir is not None:
        save_reference_encoders(refs, out_dir, report)
    return refs, report


def run_stage1(cfg: RunConfig, manifest: DatasetManifest, refs: ReferenceEncoders,
               out_dir=None):
    align_cfg = cfg.align
    align_cfg.seed = derive_seed(cfg.seed, "stage1")
    state, history = train_alignment(manifest, refs, align_cfg, out_dir=out_dir)
    return state, history


def run_stage2(cfg: RunConfig, manifest: DatasetManifest, refs: ReferenceEncoders,
               eeg_path: FrozenEEGPath, out_dir=None):
    """Warm-up the backbone text-only, then train the adapter on top."""
    out_dir = Path(out_dir) if out_dir is not None else None
    schedule = make_schedule(cfg.schedule.T, cfg.schedule.beta_start,
                             cfg.schedule.beta_end, cfg.schedule.kind)
    denoiser = build_denoiser(cfg.denoiser, derive_seed(cfg.seed, "denoiser-init"))
    warmup_log = out_dir / "warmup_metrics.jsonl" if out_dir else None
    warmup_text_backbone(manifest, refs, denoiser, schedule, cfg.stage2,
                         derive_seed(cfg.seed, "warmup"), warmup_log)
    adapter = build_adapter(cfg.adapter, derive_seed(cfg.seed, "adapter-init"))
    state = AdapterTrainState(denoiser, adapter, eeg_path, refs, schedule,
                              cfg.stage2, seed=derive_seed(cfg.seed, "stage2"))
    adapter_log = out_dir / "adapter_metrics.jsonl" if out_dir else None
    history = train_adapter(state, manifest, adapter_log)
    return denoiser, adapter, schedule, history


def build_pipeline(cfg: RunConfig, workspace) -> ModelBundle:
    """Dataset -> bootstrap -> stage 1 -> stage 2; returns a saved ModelBundle.

    The workspace directory receives dataset/, models/ (self-contained), and
    the resolved config.
    """
    workspace = Path(workspace)
    workspace.mkdir(parents=True, exist_ok=True)
    cfg.save(workspace / "config.json")
    manifest = build_dataset(cfg.dataset, workspace / "dataset")
    models_dir = workspace / "models"
    refs, _ = prepare_reference_encoders(cfg, models_dir)
    align_state, _ = run_stage1(cfg, manifest, refs, out_dir=models_dir)
    eeg_path = FrozenEEGPath(align_state.encoder)
    denoiser, adapter, schedule, _ = run_stage2(cfg, manifest, refs, eeg_path,
                                                out_dir=models_dir)
    bundle = ModelBundle(config=cfg, vocab=cfg.dataset.vocab,
                         tokenizer=Tokenizer(cfg.dataset.vocab), refs=refs,
                         eeg_path=eeg_path, denoiser=denoiser, adapter=adapter,
                         schedule=schedule)
    bundle.save(models_dir)
    return bundle
