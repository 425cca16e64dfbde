"""Ablation harness: adapter injector variants, alignment loss-term variants,
and the mask-ratio sweep, each trained and evaluated under one shared budget
with identical seeds.
"""

import copy
import json
from dataclasses import replace
from pathlib import Path

import torch

from ..alignment import retrieval_eval, embed_split
from ..conditioning import FrozenEEGPath, build_adapter
from ..diffusion import make_schedule
from ..seeding import derive_seed
from ..synthworld import DatasetConfig, Tokenizer, build_dataset
from .config import RunConfig, Stage2Config
from .evaluation import evaluate_pipeline
from .models import ModelBundle
from .training import (
    AdapterTrainState, build_denoiser, prepare_reference_encoders, run_stage1,
    train_adapter, train_oracle_classifier, warmup_text_backbone,
)

SUITES = ("injector", "loss_terms", "mask_ratio")

INJECTOR_VARIANTS = ("direct", "xattn", "film")
MASK_RATIO_VARIANTS = (0.3, 0.5, 0.75)
LOSS_TERM_VARIANTS = (
    ("ours", {}),
    ("w/o masked modeling", {"mask_ratio": 0.0}),
    ("w/o text supervision", {"terms": ("EI", "IT")}),
)


def ablation_run_config(seed=0) -> RunConfig:
    """Reduced-budget configuration shared by all ablation variants.

    The dataset uses a low EEG SNR so stage-1 operates where supervision
    choices matter, and stage-2 budgets are small: the suites compare
    variants, they do not chase absolute quality.
    """
    cfg = RunConfig(seed=seed)
    cfg.dataset = DatasetConfig(seed=seed, snr_db=-11.0,
                                split_ratios=(0.7, 0.05, 0.25))
    cfg.stage2 = Stage2Config(warmup_steps=400, adapter_steps=250,
                              warmup_batch_size=16, batch_size=16)
    cfg.eval.steps = 20
    cfg.eval.num_samples = 1
    cfg.__post_init__()
    return cfg


class _AblationBase:
    """Artifacts shared across variants: dataset, refs, warm backbone, oracle."""

    def __init__(self, cfg: RunConfig, out_dir, refs=None):
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        cfg.save(self.out_dir / "config.json")
        self.manifest = build_dataset(cfg.dataset, self.out_dir / "dataset")
        if refs is None:
            refs, _ = prepare_reference_encoders(cfg)
        self.refs = refs
        self.schedule = make_schedule(cfg.schedule.T, cfg.schedule.beta_start,
                                      cfg.schedule.beta_end, cfg.schedule.kind)
        self.denoiser = build_denoiser(cfg.denoiser, derive_seed(cfg.seed, "denoiser-init"))
        warmup_text_backbone(self.manifest, refs, self.denoiser, self.schedule,
                             cfg.stage2, derive_seed(cfg.seed, "warmup"))
        for p in self.denoiser.parameters():
            p.requires_grad_(False)
        self.oracle = train_oracle_classifier(
            self.manifest, seed=cfg.seed, epochs=cfg.eval.oracle_epochs,
            min_val_accuracy=cfg.eval.oracle_min_val_accuracy)

    def stage1(self, align_overrides: dict):
        cfg = copy.deepcopy(self.cfg)
        for key, value in align_overrides.items():
            setattr(cfg.align, key, value)
        state, _ = run_stage1(cfg, self.manifest, self.refs)
        return state

    def adapter_variant(self, eeg_path: FrozenEEGPath, injector="film"):
        adapter_cfg = replace(self.cfg.adapter, injector=injector)
        adapter = build_adapter(adapter_cfg, derive_seed(self.cfg.seed, "adapter-init"))
        state = AdapterTrainState(self.denoiser, adapter, eeg_path, self.refs,
                                  self.schedule, self.cfg.stage2,
                                  seed=derive_seed(self.cfg.seed, "stage2"))
        train_adapter(state, self.manifest)
        return adapter

    def evaluate(self, eeg_path, adapter):
        bundle = ModelBundle(config=self.cfg, vocab=self.cfg.dataset.vocab,
                             tokenizer=Tokenizer(self.cfg.dataset.vocab),
                             refs=self.refs, eeg_path=eeg_path,
                             denoiser=self.denoiser, adapter=adapter,
                             schedule=self.schedule)
        report = evaluate_pipeline(bundle, self.manifest, oracle=self.oracle,
                                   split=self.cfg.eval.split,
                                   seed=derive_seed(self.cfg.seed, "abl-eval"),
                                   with_baseline=False)
        return report

    def stage1_retrieval(self, align_state):
        f_eeg, f_img, labels = embed_split(self.manifest, align_state.encoder,
                                           self.refs, self.cfg.eval.split)
        return retrieval_eval(f_eeg, f_img, labels)


def run_ablation(suite: str, cfg: RunConfig = None, out_dir="ablation_out",
                 refs=None) -> dict:
    """Train and evaluate every variant of one suite; emit a comparison table."""
    if suite not in SUITES:
        raise ValueError(f"suite must be one of {SUITES}, got {suite!r}")
    cfg = cfg or ablation_run_config()
    base = _AblationBase(cfg, out_dir, refs=refs)
    rows = []

    if suite == "injector":
        align_state = base.stage1({})
        eeg_path = FrozenEEGPath(align_state.encoder)
        for kind in INJECTOR_VARIANTS:
            adapter = base.adapter_variant(eeg_path, injector=kind)
            report = base.evaluate(eeg_path, adapter)
            rows.append({"variant": kind, "eca_proxy": report.eca_proxy,
                         "cs_proxy": report.cs_proxy,
                         "adapter_params": adapter.added_param_count()})
    elif suite == "loss_terms":
        for name, overrides in LOSS_TERM_VARIANTS:
            align_state = base.stage1(overrides)
            retrieval = base.stage1_retrieval(align_state)
            eeg_path = FrozenEEGPath(align_state.encoder)
            adapter = base.adapter_variant(eeg_path)
            report = base.evaluate(eeg_path, adapter)
            rows.append({"variant": name, "eca_proxy": report.eca_proxy,
                         "cs_proxy": report.cs_proxy,
                         "adapter_params": adapter.added_param_count(),
                         "stage1_class_top1": retrieval["class_top1"],
                         "stage1_instance_top1": retrieval["instance_top1"]})
    else:  # mask_ratio
        for ratio in MASK_RATIO_VARIANTS:
            align_state = base.stage1({"mask_ratio": ratio})
            retrieval = base.stage1_retrieval(align_state)
            eeg_path = FrozenEEGPath(align_state.encoder)
            adapter = base.adapter_variant(eeg_path)
            report = base.evaluate(eeg_path, adapter)
            rows.append({"variant": f"mask_ratio={ratio}", "mask_ratio": ratio,
                         "eca_proxy": report.eca_proxy,
                         "cs_proxy": report.cs_proxy,
                         "adapter_params": adapter.added_param_count(),
                         "stage1_class_top1": retrieval["class_top1"]})

    report = {"suite": suite, "rows": rows, "seed": cfg.seed}
    out_dir = Path(out_dir)
    with open(out_dir / f"ablation_{suite}.json", "w") as f:
        json.dump(report, f, indent=1)
    table = ablation_table(report)
    (out_dir / f"ablation_{suite}.txt").write_text(table)
    return report


def ablation_table(report) -> str:
    rows = report["rows"]
    cols = ["variant", "eca_proxy", "cs_proxy", "adapter_params"]
    if any("stage1_class_top1" in r for r in rows):
        cols.append("stage1_class_top1")
    header = "".join(f"{c:<22}" for c in cols)
    lines = [header, "-" * len(header)]
    for r in rows:
        cells = []
        for c in cols:
            v = r.get(c, "")
            cells.append(f"{v:<22.4f}" if isinstance(v, float) else f"{v:<22}")
        lines.append("".join(cells))
    return "\n".join(lines) + "\n"
