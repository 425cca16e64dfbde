"""Generation entry point: EEG (and optional text) to images.

Each sample draws its own derived seed; omitted text means the null text
sequence, matching the EEG-only inference setting.
"""

from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch

from ..diffusion import ConditioningBundle, ddim_trajectory
from ..seeding import derive_seed, torch_gen
from ..synthworld import EEGRecord, save_image_png
from .models import ModelBundle


@dataclass
class GenerationRequest:
    eeg: object = None          # EEGRecord, precomputed embedding tensor, or None
    text: str | None = None    # None -> null text sequence
    steps: int = 50
    w: float = 7.5
    lam: float = 1.0
    seed: int = 0
    num_samples: int = 1


def _eeg_embedding(models: ModelBundle, eeg, batch):
    if eeg is None:
        return torch.zeros(batch, models.eeg_path.out_dim)
    if isinstance(eeg, EEGRecord):
        emb = models.eeg_path.embed(torch.as_tensor(eeg.samples).unsqueeze(0))
        return emb.expand(batch, -1)
    emb = torch.as_tensor(eeg, dtype=torch.float32)
    if emb.ndim == 1:
        emb = emb.unsqueeze(0)
    if emb.shape[-1] != models.eeg_path.out_dim:
        raise ValueError(f"EEG embedding dim {emb.shape[-1]} != encoder out_dim "
                         f"{models.eeg_path.out_dim}")
    return emb.expand(batch, -1)


def stacked_noise(shape, seed, num_samples):
    """Per-sample derived seeds, stacked for one batched trajectory."""
    draws = [torch.randn(shape, generator=torch_gen(derive_seed(seed, "sample", i)),
                         dtype=torch.float64)
             for i in range(num_samples)]
    return torch.stack(draws)


def generate(request: GenerationRequest, models: ModelBundle, out_dir=None):
    """Sample images for one request; optionally write PNGs and a grid.

    Returns a list of [H, W, 3] float arrays in [-1, 1].
    """
    n = request.num_samples
    if n < 1:
        raise ValueError("num_samples must be >= 1")
    conds = ConditioningBundle(models.encode_text(request.text, batch=n),
                               _eeg_embedding(models, request.eeg, n))
    x_start = stacked_noise(models.image_shape, request.seed, n)
    images = ddim_trajectory(models.denoise_fn(lam=request.lam), models.schedule,
                             conds, x_start, request.steps, request.w)
    arrays = [img.permute(1, 2, 0).numpy() for img in images]
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for i, arr in enumerate(arrays):
            save_image_png(arr, out_dir / f"sample_{i:03d}.png")
        save_image_png(image_grid(arrays), out_dir / "grid.png")
        with open(out_dir / "request.json", "w") as f:
            import json
            req = asdict(request)
            req["eeg"] = type(request.eeg).__name__ if request.eeg is not None else None
            json.dump(req, f, indent=1)
    return arrays


def generate_batch(models: ModelBundle, eeg_embeddings, text_seqs=None,
                   steps=50, w=7.5, lam=1.0, seed=0):
    """Batched sampling used by evaluation: one image per conditioning row."""
    n = eeg_embeddings.shape[0]
    if text_seqs is None:
        t_cfg = models.refs.text_encoder.cfg
        text_seqs = torch.zeros(n, t_cfg.max_len, t_cfg.d_ctx)
    conds = ConditioningBundle(text_seqs, eeg_embeddings)
    x_start = stacked_noise(models.image_shape, seed, n)
    images = ddim_trajectory(models.denoise_fn(lam=lam), models.schedule,
                             conds, x_start, steps, w)
    return images.permute(0, 2, 3, 1).numpy()


def image_grid(arrays, columns=None):
    """Tile [H, W, 3] arrays into one grid image."""
    n = len(arrays)
    columns = columns or int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / columns))
    h, w, _ = arrays[0].shape
    grid = np.full((rows * h, columns * w, 3), -1.0, dtype=np.float32)
    for i, arr in enumerate(arrays):
        r, c = divmod(i, columns)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = arr
    return grid
