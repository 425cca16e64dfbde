"""Loadable bundle of everything generation needs, with on-disk layout.

A models directory is self-contained: reference encoders, the frozen
stage-1 EEG encoder, the diffusion backbone, the adapter, and config.
Checkpoint sidecars record architecture configs and content checksums, so
dimension mismatches are caught at load time.
"""

from dataclasses import dataclass, asdict
from pathlib import Path

import torch

from ..alignment import load_alignment_encoder, save_alignment
from ..conditioning import (
    AdapterConfig, DenoiserConfig, EEGAdapter, FrozenEEGPath, UNetDenoiser,
)
from ..diffusion import (
    ConditioningBundle, IDENTITY_CODEC, NoiseSchedule, make_schedule,
)
from ..encoders import (
    ReferenceEncoders, load_into, load_reference_encoders, load_sidecar,
    save_checkpoint, save_reference_encoders,
)
from ..synthworld import Tokenizer, Vocabulary
from .config import RunConfig


@dataclass
class ModelBundle:
    config: RunConfig
    vocab: Vocabulary
    tokenizer: Tokenizer
    refs: ReferenceEncoders
    eeg_path: FrozenEEGPath
    denoiser: UNetDenoiser
    adapter: EEGAdapter | None
    schedule: NoiseSchedule
    codec: object = IDENTITY_CODEC

    @property
    def image_shape(self):
        cfg = self.denoiser.cfg
        return (cfg.in_channels, cfg.image_size, cfg.image_size)

    def denoise_fn(self, adapter="default", lam=None):
        """Closure for the sampler; `adapter=None` removes the adapter path."""
        active = self.adapter if adapter == "default" else adapter

        def fn(x_t, t, conds: ConditioningBundle):
            return self.denoiser(x_t.to(torch.float32), t, conds, active, lam)

        return fn

    def encode_text(self, text: str | None, batch=1):
        """Token-sequence conditioning for a caption; None gives the null text."""
        t_cfg = self.refs.text_encoder.cfg
        if text is None or text == "":
            return torch.zeros(batch, t_cfg.max_len, t_cfg.d_ctx)
        tokens = torch.as_tensor(self.tokenizer.encode(text)).unsqueeze(0)
        _, seq = self.refs.encode_text(tokens)
        return seq.expand(batch, -1, -1)

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.config.save(directory / "config.json")
        save_reference_encoders(self.refs, directory)
        save_checkpoint(self.eeg_path.encoder, directory / "eeg_encoder.pt",
                        asdict(self.eeg_path.encoder.cfg))
        save_checkpoint(self.denoiser, directory / "backbone.pt",
                        asdict(self.denoiser.cfg))
        if self.adapter is not None:
            save_checkpoint(self.adapter, directory / "adapter.pt",
                            self.adapter.sidecar_config())

    @classmethod
    def load(cls, directory) -> "ModelBundle":
        directory = Path(directory)
        config = RunConfig.load(directory / "config.json")
        vocab = config.dataset.vocab
        refs = load_reference_encoders(directory, vocab)
        eeg_encoder = load_alignment_encoder(directory)
        denoiser_cfg = DenoiserConfig(**load_sidecar(directory / "backbone.pt")["config"])
        denoiser = UNetDenoiser(denoiser_cfg)
        load_into(denoiser, directory / "backbone.pt")
        denoiser.eval()
        adapter = None
        if (directory / "adapter.pt").exists():
            side = load_sidecar(directory / "adapter.pt")["config"]
            adapter_cfg = AdapterConfig(
                injector=side["injector_kind"], embed_dim=side["embed_dim"],
                hidden=side["hidden"], site_widths=tuple(side["widths"]),
                lam=side["lambda"])
            adapter = EEGAdapter(adapter_cfg)
            load_into(adapter, directory / "adapter.pt")
            adapter.eval()
        bundle = cls(
            config=config, vocab=vocab, tokenizer=Tokenizer(vocab), refs=refs,
            eeg_path=FrozenEEGPath(eeg_encoder), denoiser=denoiser, adapter=adapter,
            schedule=make_schedule(config.schedule.T, config.schedule.beta_start,
                                   config.schedule.beta_end, config.schedule.kind),
        )
        bundle.check_compatible()
        return bundle

    def check_compatible(self):
        """Checkpoint dimensions recorded in sidecars must agree."""
        problems = []
        if self.adapter is not None:
            if self.adapter.cfg.embed_dim != self.eeg_path.out_dim:
                problems.append(
                    f"adapter embed_dim {self.adapter.cfg.embed_dim} != EEG encoder "
                    f"out_dim {self.eeg_path.out_dim}")
            if tuple(self.adapter.cfg.site_widths) != tuple(self.denoiser.cfg.site_widths):
                problems.append(
                    f"adapter site widths {self.adapter.cfg.site_widths} != denoiser "
                    f"{self.denoiser.cfg.site_widths}")
        if self.refs.text_encoder.cfg.d_ctx != self.denoiser.cfg.d_ctx:
            problems.append(
                f"text d_ctx {self.refs.text_encoder.cfg.d_ctx} != denoiser d_ctx "
                f"{self.denoiser.cfg.d_ctx}")
        if problems:
            raise ValueError("incompatible checkpoints: " + "; ".join(problems))


__all__ = ["ModelBundle", "save_alignment"]
