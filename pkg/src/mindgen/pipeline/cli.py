"""Command-line entry points.

    synth-data    --config cfg.json --out data/
    train-align   --config cfg.json --data data/manifest.json --out stage1/
    train-adapter --config cfg.json --data data/manifest.json --stage1 stage1/ --out models/
    generate      --models models/ --eeg rec.f32 --text "a red circle" --out gen/
    evaluate      --models models/ --data data/manifest.json --split test --out eval/
    ablate        --suite {injector,loss_terms,mask_ratio} --out abl/

Each command copies its resolved configuration into the output directory.
"""

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from ..alignment import load_alignment_encoder, save_alignment
from ..conditioning import FrozenEEGPath
from ..diffusion import make_schedule
from ..encoders import load_reference_encoders
from ..seeding import derive_seed
from ..synthworld import (
    DatasetConfig, EEGRecord, Tokenizer, build_dataset, load_manifest,
)
from .ablation import SUITES, ablation_run_config, run_ablation
from .config import RunConfig, load_run_config
from .evaluation import evaluate_pipeline
from .generation import GenerationRequest, generate
from .models import ModelBundle
from .training import prepare_reference_encoders, run_stage1, run_stage2

torch.set_num_threads(max(1, torch.get_num_threads()))


def _out_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_config(path) -> RunConfig:
    cfg = load_run_config(path)
    return cfg


def synth_data_main(argv=None):
    p = argparse.ArgumentParser(prog="synth-data",
                                description="Generate the synthetic EEG/image/caption dataset")
    p.add_argument("--config", default=None, help="run config JSON (dataset section used)")
    p.add_argument("--out", required=True, help="output dataset directory")
    args = p.parse_args(argv)
    cfg = _load_config(args.config)
    out = _out_dir(args.out)
    cfg.save(out / "config.json")
    manifest = build_dataset(cfg.dataset, out)
    print(f"wrote {len(manifest.records)} records to {out}")
    return 0


def train_align_main(argv=None):
    p = argparse.ArgumentParser(prog="train-align",
                                description="Bootstrap reference encoders and run stage-1 alignment")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True, help="dataset manifest path")
    p.add_argument("--out", required=True, help="checkpoint directory")
    args = p.parse_args(argv)
    cfg = _load_config(args.config)
    out = _out_dir(args.out)
    cfg.save(out / "config.json")
    manifest = load_manifest(args.data)
    refs, report = prepare_reference_encoders(cfg, out)
    print(f"reference encoders ready: holdout top-1 "
          f"{report['holdout_image_to_text_top1']:.3f} ({report['epochs']} epochs)")
    state, history = run_stage1(cfg, manifest, refs, out_dir=out)
    print(f"stage-1 done: {len(history)} steps, final loss {history[-1]['loss']:.4f}, "
          f"tau {history[-1]['tau']:.4f}; metrics in {out / 'metrics.jsonl'}")
    return 0


def train_adapter_main(argv=None):
    p = argparse.ArgumentParser(prog="train-adapter",
                                description="Warm up the text backbone and train the EEG adapter")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--stage1", required=True, help="directory from train-align")
    p.add_argument("--out", required=True, help="self-contained models directory")
    args = p.parse_args(argv)
    cfg = _load_config(args.config)
    out = _out_dir(args.out)
    manifest = load_manifest(args.data)
    stage1_dir = Path(args.stage1)
    refs = load_reference_encoders(stage1_dir, cfg.dataset.vocab)
    eeg_path = FrozenEEGPath(load_alignment_encoder(stage1_dir))
    denoiser, adapter, schedule, history = run_stage2(cfg, manifest, refs, eeg_path,
                                                      out_dir=out)
    bundle = ModelBundle(config=cfg, vocab=cfg.dataset.vocab,
                         tokenizer=Tokenizer(cfg.dataset.vocab), refs=refs,
                         eeg_path=eeg_path, denoiser=denoiser, adapter=adapter,
                         schedule=schedule)
    bundle.save(out)
    print(f"stage-2 done: {len(history)} adapter steps, final loss "
          f"{history[-1]['loss']:.4f}; models in {out}")
    return 0


def generate_main(argv=None):
    p = argparse.ArgumentParser(prog="generate",
                                description="Generate images from an EEG recording (and optional text)")
    p.add_argument("--models", required=True, help="models directory from train-adapter")
    p.add_argument("--eeg", default=None, help="raw float32 EEG file; omit for text-only")
    p.add_argument("--text", default=None, help="caption; omit for EEG-only")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--w", type=float, default=7.5)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-samples", type=int, default=1)
    p.add_argument("--out", required=True)
    args = p.parse_args(argv)
    models = ModelBundle.load(args.models)
    eeg = None
    if args.eeg is not None:
        ds = models.config.dataset
        raw = np.frombuffer(Path(args.eeg).read_bytes(), dtype="<f4")
        eeg = EEGRecord(raw.reshape(ds.channels, ds.timesteps).copy(), subject_id=0,
                        sample_rate_hz=ds.sample_rate_hz)
    request = GenerationRequest(eeg=eeg, text=args.text, steps=args.steps,
                                w=args.w, lam=args.lam, seed=args.seed,
                                num_samples=args.num_samples)
    out = _out_dir(args.out)
    models.config.save(out / "config.json")
    images = generate(request, models, out_dir=out)
    print(f"wrote {len(images)} samples to {out}")
    return 0


def evaluate_main(argv=None):
    p = argparse.ArgumentParser(prog="evaluate",
                                description="EEG-only generation metrics on a held-out split")
    p.add_argument("--models", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--w", type=float, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-samples", type=int, default=None)
    p.add_argument("--out", required=True)
    args = p.parse_args(argv)
    models = ModelBundle.load(args.models)
    manifest = load_manifest(args.data)
    out = _out_dir(args.out)
    models.config.save(out / "config.json")
    report = evaluate_pipeline(models, manifest, split=args.split, steps=args.steps,
                               w=args.w, lam=args.lam, num_samples=args.num_samples,
                               seed=args.seed, out_dir=out)
    print(report.table())
    return 0


def ablate_main(argv=None):
    p = argparse.ArgumentParser(prog="ablate",
                                description="Run one ablation suite end to end")
    p.add_argument("--suite", required=True, choices=SUITES)
    p.add_argument("--config", default=None,
                   help="run config JSON; defaults to the reduced ablation config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    args = p.parse_args(argv)
    cfg = RunConfig.load(args.config) if args.config else ablation_run_config(args.seed)
    report = run_ablation(args.suite, cfg, out_dir=args.out)
    print((Path(args.out) / f"ablation_{args.suite}.txt").read_text())
    return 0


def main(argv=None):
    commands = {
        "synth-data": synth_data_main,
        "train-align": train_align_main,
        "train-adapter": train_adapter_main,
        "generate": generate_main,
        "evaluate": evaluate_main,
        "ablate": ablate_main,
    }
    argv = sys.argv[1:] if argv is None else argv
    if not argv or argv[0] not in commands:
        print("usage: mindgen {" + ",".join(commands) + "} [options]", file=sys.stderr)
        return 2
    return commands[argv[0]](argv[1:])
