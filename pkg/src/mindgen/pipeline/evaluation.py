"""Desk-scale evaluation: class accuracy of generated images under a frozen
oracle classifier, and cosine similarity to ground-truth images in the
frozen reference embedding space. Both are computed on held-out records only.
"""

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from ..encoders import normalize
from ..synthworld import load_triplet_batch, save_image_png
from .generation import generate_batch, image_grid
from .models import ModelBundle
from .training import OracleClassifier, train_oracle_classifier


def _to_image_tensor(images):
    arr = np.asarray(images, dtype=np.float32)
    return torch.as_tensor(arr).permute(0, 3, 1, 2).contiguous()


def eval_eca(generated, true_labels, oracle: OracleClassifier) -> float:
    """Fraction of generated images classified as their EEG's true class."""
    pred = oracle.predict(_to_image_tensor(generated))
    return float((pred == torch.as_tensor(true_labels)).float().mean())


def embedding_cosine_mean(a: torch.Tensor, b: torch.Tensor) -> float:
    """Mean cosine similarity between paired embedding rows."""
    return float((normalize(a) * normalize(b)).sum(dim=-1).mean())


def eval_cs(generated, references, ref_encoders) -> float:
    """Mean cosine similarity of generated vs ground-truth reference embeddings."""
    with torch.no_grad():
        gen_emb = ref_encoders.image_encoder(_to_image_tensor(generated))
        ref_emb = ref_encoders.image_encoder(_to_image_tensor(references))
    return embedding_cosine_mean(gen_emb, ref_emb)


@dataclass
class EvalReport:
    eca_proxy: float
    cs_proxy: float
    baseline_cs: float | None
    per_class: dict
    split: str
    num_records: int
    num_samples: int
    oracle_val_accuracy: float
    config_snapshot: dict = field(default_factory=dict)
    sample_paths: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def save(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "eval_report.json", "w") as f:
            json.dump(self.to_dict(), f, indent=1)
        with open(out_dir / "eval_report.txt", "w") as f:
            f.write(self.table())

    def table(self):
        lines = [
            f"{'metric':<24}{'value':>10}",
            "-" * 34,
            f"{'eca_proxy':<24}{self.eca_proxy:>10.4f}",
            f"{'cs_proxy':<24}{self.cs_proxy:>10.4f}",
        ]
        if self.baseline_cs is not None:
            lines.append(f"{'baseline_cs':<24}{self.baseline_cs:>10.4f}")
        lines.append(f"{'oracle_val_accuracy':<24}{self.oracle_val_accuracy:>10.4f}")
        for cls, acc in sorted(self.per_class.items()):
            lines.append(f"{'eca[' + str(cls) + ']':<24}{acc:>10.4f}")
        return "\n".join(lines) + "\n"


def evaluate_pipeline(models: ModelBundle, manifest, oracle=None,
                      split="test", steps=None, w=None, lam=None,
                      num_samples=None, seed=0, with_baseline=True,
                      out_dir=None) -> EvalReport:
    """EEG-only generation over a held-out split, scored by the oracle
    classifier and reference-space cosine similarity.

    The unconditional baseline re-samples with null conditioning at the same
    seeds, giving the no-information reference for cs_proxy.
    """
    ev = models.config.eval
    steps = ev.steps if steps is None else steps
    w = ev.w if w is None else w
    lam = ev.lam if lam is None else lam
    num_samples = ev.num_samples if num_samples is None else num_samples

    idx = manifest.indices_for_split(split)
    if not idx:
        raise ValueError(f"manifest has no {split!r} split")
    records = [manifest.records[i] for i in idx]
    if any(r.split != split for r in records):
        raise AssertionError("evaluation hygiene: record outside requested split")

    if oracle is None:
        oracle, oracle_report = train_oracle_classifier(
            manifest, seed=seed, epochs=ev.oracle_epochs, lr=ev.oracle_lr,
            min_val_accuracy=ev.oracle_min_val_accuracy)
    else:
        oracle, oracle_report = oracle

    data = load_triplet_batch(manifest, idx)
    eeg_emb = models.eeg_path.embed(torch.as_tensor(data.eeg))
    labels = np.repeat(data.class_ids, num_samples)
    eeg_rep = eeg_emb.repeat_interleave(num_samples, dim=0)
    generated = generate_batch(models, eeg_rep, steps=steps, w=w, lam=lam, seed=seed)
    references = np.repeat(data.images, num_samples, axis=0)

    eca = eval_eca(generated, labels, oracle)
    cs = eval_cs(generated, references, models.refs)
    per_class = {}
    for cls in sorted(set(int(c) for c in labels)):
        sel = labels == cls
        per_class[int(cls)] = eval_eca(generated[sel], labels[sel], oracle)

    baseline_cs = None
    if with_baseline:
        null_eeg = torch.zeros_like(eeg_rep)
        baseline = generate_batch(models, null_eeg, steps=steps, w=w, lam=lam,
                                  seed=seed)
        baseline_cs = eval_cs(baseline, references, models.refs)

    report = EvalReport(
        eca_proxy=eca, cs_proxy=cs, baseline_cs=baseline_cs, per_class=per_class,
        split=split, num_records=len(idx), num_samples=num_samples,
        oracle_val_accuracy=oracle_report["val_accuracy"],
        config_snapshot={"steps": steps, "w": w, "lam": lam, "seed": seed},
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        sample_dir = out_dir / "samples"
        sample_dir.mkdir(exist_ok=True)
        paths = []
        for i in range(min(len(generated), 64)):
            p = sample_dir / f"gen_{i:04d}_class{int(labels[i])}.png"
            save_image_png(generated[i], p)
            paths.append(str(p))
        save_image_png(image_grid([generated[i] for i in range(min(len(generated), 36))]),
                       out_dir / "grid.png")
        report.sample_paths = paths
        report.save(out_dir)
    return report
