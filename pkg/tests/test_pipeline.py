import json
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

import mindgen.pipeline as pl
from mindgen import alignment as al
from mindgen import conditioning as cond
from mindgen import diffusion as df
from mindgen import encoders as enc
from mindgen import synthworld as sw
from mindgen.pipeline import cli
from mindgen.pipeline.evaluation import embedding_cosine_mean
from mindgen.pipeline.training import encode_text_batch

torch.set_num_threads(2)


def tiny_run_config(seed=3):
    cfg = pl.RunConfig(seed=seed)
    cfg.dataset = sw.DatasetConfig(num_classes=2, num_colors=2, num_backgrounds=2,
                                   per_class=40, split_ratios=(0.8, 0.1, 0.1),
                                   seed=3, channels=16, timesteps=128)
    cfg.align = al.AlignConfig(epochs=2, batch_size=16, encoder=enc.EEGEncoderConfig(
        channels=16, timesteps=128, patch_len=16, width=32, depth=2, heads=2))
    cfg.denoiser = cond.DenoiserConfig(base=16)
    cfg.stage2 = pl.Stage2Config(warmup_steps=40, warmup_batch_size=8,
                                 adapter_steps=30, batch_size=8)
    cfg.eval = pl.EvalConfig(steps=10, num_samples=1)
    cfg.__post_init__()
    return cfg


@pytest.fixture(scope="session")
def tiny_stage2(tiny_dataset, tiny_refs):
    """Warm backbone + adapter state on the tiny corpus (quality irrelevant)."""
    cfg = tiny_run_config()
    schedule = df.make_schedule(cfg.schedule.T, cfg.schedule.beta_start,
                                cfg.schedule.beta_end)
    denoiser = cond.build_denoiser(cfg.denoiser, 11)
    pl.warmup_text_backbone(tiny_dataset, tiny_refs, denoiser, schedule,
                            cfg.stage2, seed=12)
    align_state = al.AlignState(cfg.align)
    eeg_path = cond.FrozenEEGPath(align_state.encoder)
    adapter = cond.build_adapter(cfg.adapter, 13)
    return cfg, denoiser, adapter, eeg_path, schedule


@pytest.fixture(scope="session")
def tiny_bundle(tiny_stage2, tiny_refs, tiny_dataset):
    cfg, denoiser, adapter, eeg_path, schedule = tiny_stage2
    state = pl.AdapterTrainState(denoiser, adapter, eeg_path, tiny_refs, schedule,
                                 cfg.stage2, seed=14)
    pl.train_adapter(state, tiny_dataset)
    return pl.ModelBundle(config=cfg, vocab=cfg.dataset.vocab,
                          tokenizer=sw.Tokenizer(cfg.dataset.vocab), refs=tiny_refs,
                          eeg_path=eeg_path, denoiser=denoiser, adapter=adapter,
                          schedule=schedule)


# ---------------------------------------------------------------------------
# config

def test_run_config_round_trip(tmp_path):
    cfg = tiny_run_config()
    cfg.save(tmp_path / "cfg.json")
    loaded = pl.RunConfig.load(tmp_path / "cfg.json")
    assert loaded.to_dict() == cfg.to_dict()


def test_run_config_rejects_unknown_keys(tmp_path):
    doc = tiny_run_config().to_dict()
    doc["learning_rate"] = 1.0
    with pytest.raises(ValueError, match="unknown config keys"):
        pl.RunConfig.from_dict(doc)


def test_schedule_config_keys():
    cfg = pl.RunConfig()
    assert set(cfg.to_dict()["schedule"]) == {"T", "beta_start", "beta_end", "kind"}


# ---------------------------------------------------------------------------
# oracle classifier

@pytest.fixture(scope="session")
def oracle8(tmp_path_factory):
    dcfg = sw.DatasetConfig(num_classes=8, per_class=24, split_ratios=(0.8, 0.1, 0.1),
                            seed=9, channels=4, timesteps=16)
    manifest = sw.build_dataset(dcfg, tmp_path_factory.mktemp("oracle_data"))
    model, report = pl.train_oracle_classifier(manifest, seed=1)
    return manifest, model, report


def test_oracle_reaches_gate_and_freezes(oracle8):
    manifest, model, report = oracle8
    assert report["val_accuracy"] >= 0.95
    before = enc.weights_checksum(model)
    model.predict(torch.randn(4, 3, 32, 32, generator=torch.Generator().manual_seed(0)))
    assert enc.weights_checksum(model) == before
    assert all(not p.requires_grad for p in model.parameters())


def test_oracle_deterministic_given_seed(tiny_dataset):
    a, _ = pl.train_oracle_classifier(tiny_dataset, seed=4, epochs=3)
    b, _ = pl.train_oracle_classifier(tiny_dataset, seed=4, epochs=3)
    assert enc.weights_checksum(a) == enc.weights_checksum(b)


def test_oracle_abort_when_gate_unreachable(tiny_dataset):
    with pytest.raises(RuntimeError, match="validation accuracy"):
        pl.train_oracle_classifier(tiny_dataset, seed=4, epochs=1,
                                   min_val_accuracy=1.01)


# ---------------------------------------------------------------------------
# metrics

def test_eval_eca_on_ground_truth_renders(oracle8):
    manifest, model, report = oracle8
    idx = manifest.indices_for_split("test")
    batch = sw.load_triplet_batch(manifest, idx)
    acc = pl.eval_eca(batch.images, batch.class_ids, model)
    assert acc >= report["val_accuracy"] - 1e-9


def test_eval_eca_uniform_noise_near_chance(oracle8):
    manifest, model, _ = oracle8
    vals = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        noise = rng.uniform(-1, 1, size=(64, 32, 32, 3)).astype(np.float32)
        labels = rng.integers(0, 8, size=64)
        vals.append(pl.eval_eca(noise, labels, model))
    assert 0.02 <= float(np.mean(vals)) <= 0.30


def test_eval_cs_self_similarity(tiny_refs, tiny_dataset):
    idx = tiny_dataset.indices_for_split("test")
    batch = sw.load_triplet_batch(tiny_dataset, idx)
    assert abs(pl.eval_cs(batch.images, batch.images, tiny_refs) - 1.0) < 1e-6


def test_embedding_cosine_antipodal():
    e = torch.randn(5, 16, generator=torch.Generator().manual_seed(2))
    assert abs(embedding_cosine_mean(e, -e) + 1.0) < 1e-6


# ---------------------------------------------------------------------------
# stage-2 training

def test_adapter_step_zero_init_matches_text_only(tiny_stage2, tiny_refs, tiny_dataset):
    cfg, denoiser, _, eeg_path, schedule = tiny_stage2
    stage2 = replace(cfg.stage2, p_text=0.0, p_eeg=0.0, p_both=0.0)
    adapter = cond.build_adapter(cfg.adapter, 99)  # fresh zero-init projection
    state = pl.AdapterTrainState(denoiser, adapter, eeg_path, tiny_refs, schedule,
                                 stage2, seed=21)
    idx = tiny_dataset.indices_for_split("train")[:8]
    batch = sw.load_triplet_batch(tiny_dataset, idx)
    metrics = pl.train_adapter_step(state, batch)

    x0 = torch.as_tensor(batch.images).permute(0, 3, 1, 2)
    text_seq = encode_text_batch(tiny_refs, batch.captions)
    conds = df.ConditioningBundle(text_seq, eeg_path.embed(torch.as_tensor(batch.eeg)))
    from mindgen.seeding import derive_seed, torch_gen
    rng = torch_gen(derive_seed(21, "stage2", "objective"))
    text_only = df.ddpm_loss(lambda x, t, c: denoiser(x, t, c, None), schedule,
                             x0, conds, rng)
    assert metrics["loss"] == float(text_only)
    assert {"step", "loss", "grad_norm"} <= set(metrics)


def test_adapter_training_leaves_frozen_parts_untouched(tiny_stage2, tiny_refs,
                                                        tiny_dataset):
    cfg, denoiser, _, eeg_path, schedule = tiny_stage2
    adapter = cond.build_adapter(cfg.adapter, 55)
    state = pl.AdapterTrainState(denoiser, adapter, eeg_path, tiny_refs, schedule,
                                 cfg.stage2, seed=22)
    eeg_before = eeg_path.checksum()
    backbone_before = enc.weights_checksum(denoiser)
    adapter_before = enc.weights_checksum(adapter)
    idx = tiny_dataset.indices_for_split("train")[:8]
    batch = sw.load_triplet_batch(tiny_dataset, idx)
    for _ in range(3):
        pl.train_adapter_step(state, batch)
    assert eeg_path.checksum() == eeg_before
    assert enc.weights_checksum(denoiser) == backbone_before
    assert enc.weights_checksum(adapter) != adapter_before


def test_adapter_train_loop_writes_metrics(tiny_stage2, tiny_refs, tiny_dataset,
                                           tmp_path):
    cfg, denoiser, _, eeg_path, schedule = tiny_stage2
    adapter = cond.build_adapter(cfg.adapter, 56)
    stage2 = replace(cfg.stage2, adapter_steps=5)
    state = pl.AdapterTrainState(denoiser, adapter, eeg_path, tiny_refs, schedule,
                                 stage2, seed=23)
    history = pl.train_adapter(state, tiny_dataset, log_path=tmp_path / "m.jsonl")
    assert len(history) == 5
    lines = (tmp_path / "m.jsonl").read_text().strip().splitlines()
    assert len(lines) == 5
    assert json.loads(lines[-1])["step"] == 5


def test_adapter_step_nonfinite_guard(tiny_stage2, tiny_refs, tiny_dataset):
    cfg, denoiser, _, eeg_path, schedule = tiny_stage2
    adapter = cond.build_adapter(cfg.adapter, 57)
    with torch.no_grad():
        adapter.projections[0].linear2.weight.fill_(float("inf"))
        adapter.projections[0].linear2.bias.fill_(float("inf"))
    state = pl.AdapterTrainState(denoiser, adapter, eeg_path, tiny_refs, schedule,
                                 cfg.stage2, seed=24)
    batch = sw.load_triplet_batch(tiny_dataset, tiny_dataset.indices_for_split("train")[:4])
    with pytest.raises(RuntimeError, match="step"):
        pl.train_adapter_step(state, batch)


def test_warmup_runs_and_logs(tiny_refs, tiny_dataset, tmp_path):
    cfg = tiny_run_config()
    schedule = df.make_schedule(100, 1e-4, 0.02)
    denoiser = cond.build_denoiser(cfg.denoiser, 30)
    history = pl.warmup_text_backbone(tiny_dataset, tiny_refs, denoiser, schedule,
                                      replace(cfg.stage2, warmup_steps=12), seed=31,
                                      log_path=tmp_path / "w.jsonl")
    assert len(history) == 12
    assert all(np.isfinite(h["loss"]) for h in history)


# ---------------------------------------------------------------------------
# generation

def test_generate_deterministic_and_png_identical(tiny_bundle, tmp_path):
    idx_eeg = sw.synth_eeg(sw.SceneSpec(0, 1, 0, 5), 0, 2, 10.0,
                           channels=16, timesteps=128)
    req = pl.GenerationRequest(eeg=idx_eeg, text="a red circle", steps=10,
                               seed=42, num_samples=2)
    a = pl.generate(req, tiny_bundle, out_dir=tmp_path / "a")
    b = pl.generate(req, tiny_bundle, out_dir=tmp_path / "b")
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
    assert ((tmp_path / "a" / "sample_000.png").read_bytes()
            == (tmp_path / "b" / "sample_000.png").read_bytes())
    assert (tmp_path / "a" / "grid.png").exists()


def test_generate_lambda_zero_equals_text_only(tiny_bundle):
    eeg = sw.synth_eeg(sw.SceneSpec(1, 0, 1, 6), 0, 3, 10.0,
                       channels=16, timesteps=128)
    req = pl.GenerationRequest(eeg=eeg, text="a square", steps=10, seed=7, lam=0.0)
    with_adapter = pl.generate(req, tiny_bundle)

    text_only_bundle = replace(tiny_bundle, adapter=None)
    req2 = pl.GenerationRequest(eeg=eeg, text="a square", steps=10, seed=7, lam=1.0)
    text_only = pl.generate(req2, text_only_bundle)
    assert np.array_equal(with_adapter[0], text_only[0])


def test_generate_distinct_sample_seeds(tiny_bundle):
    req = pl.GenerationRequest(eeg=None, text="a circle", steps=5, seed=1,
                               num_samples=3)
    out = pl.generate(req, tiny_bundle)
    assert len(out) == 3
    assert not np.array_equal(out[0], out[1])


def test_generate_null_text_matches_padding_only(tiny_bundle):
    a = tiny_bundle.encode_text(None, batch=2)
    assert torch.equal(a, torch.zeros_like(a))


def test_generate_precomputed_embedding(tiny_bundle):
    emb = torch.zeros(tiny_bundle.eeg_path.out_dim)
    emb[0] = 1.0
    req = pl.GenerationRequest(eeg=emb, steps=5, seed=2)
    out = pl.generate(req, tiny_bundle)
    assert out[0].shape == (32, 32, 3)
    with pytest.raises(ValueError, match="dim"):
        pl.generate(pl.GenerationRequest(eeg=torch.zeros(7), steps=5), tiny_bundle)


# ---------------------------------------------------------------------------
# bundle save/load and evaluation

def test_model_bundle_round_trip(tiny_bundle, tmp_path):
    tiny_bundle.save(tmp_path / "models")
    loaded = pl.ModelBundle.load(tmp_path / "models")
    assert loaded.refs.checksum() == tiny_bundle.refs.checksum()
    assert (enc.weights_checksum(loaded.denoiser)
            == enc.weights_checksum(tiny_bundle.denoiser))
    assert (enc.weights_checksum(loaded.adapter)
            == enc.weights_checksum(tiny_bundle.adapter))
    eeg = sw.synth_eeg(sw.SceneSpec(0, 0, 0, 1), 0, 1, 10.0, channels=16, timesteps=128)
    req = pl.GenerationRequest(eeg=eeg, steps=5, seed=3)
    assert np.array_equal(pl.generate(req, tiny_bundle)[0],
                          pl.generate(req, loaded)[0])


def test_bundle_detects_dimension_mismatch(tiny_bundle):
    bad_adapter = cond.EEGAdapter(cond.AdapterConfig(
        embed_dim=tiny_bundle.eeg_path.out_dim + 1,
        site_widths=tiny_bundle.denoiser.cfg.site_widths))
    bad = replace(tiny_bundle, adapter=bad_adapter)
    with pytest.raises(ValueError, match="incompatible"):
        bad.check_compatible()


def test_evaluate_pipeline_structure(tiny_bundle, tiny_dataset, tmp_path):
    report = pl.evaluate_pipeline(tiny_bundle, tiny_dataset, split="test",
                                  steps=5, num_samples=1, seed=5,
                                  out_dir=tmp_path / "eval")
    assert 0.0 <= report.eca_proxy <= 1.0
    assert -1.0 <= report.cs_proxy <= 1.0
    assert report.baseline_cs is not None
    assert report.split == "test"
    assert set(report.per_class) <= {0, 1}
    assert (tmp_path / "eval" / "eval_report.json").exists()
    assert (tmp_path / "eval" / "grid.png").exists()
    doc = json.loads((tmp_path / "eval" / "eval_report.json").read_text())
    assert doc["num_records"] == len(tiny_dataset.indices_for_split("test"))


def test_evaluate_rejects_missing_split(tiny_bundle, tiny_dataset):
    with pytest.raises(ValueError):
        pl.evaluate_pipeline(tiny_bundle, tiny_dataset, split="nope", steps=5)


# ---------------------------------------------------------------------------
# CLI end-to-end (tiny budgets)

def test_cli_full_flow(tmp_path):
    cfg = tiny_run_config(seed=8)
    cfg.bootstrap = enc.BootstrapConfig(pairs=512, holdout=128, batch_size=64,
                                        max_epochs=40)
    cfg_path = tmp_path / "cfg.json"
    cfg.save(cfg_path)

    assert cli.synth_data_main(["--config", str(cfg_path),
                                "--out", str(tmp_path / "data")]) == 0
    manifest_path = tmp_path / "data" / "manifest.json"
    assert manifest_path.exists()

    assert cli.train_align_main(["--config", str(cfg_path), "--data", str(manifest_path),
                                 "--out", str(tmp_path / "stage1")]) == 0
    assert (tmp_path / "stage1" / "metrics.jsonl").exists()
    assert (tmp_path / "stage1" / "eeg_encoder.pt").exists()

    assert cli.train_adapter_main(["--config", str(cfg_path), "--data", str(manifest_path),
                                   "--stage1", str(tmp_path / "stage1"),
                                   "--out", str(tmp_path / "models")]) == 0
    assert (tmp_path / "models" / "adapter.json").exists()

    eeg_file = tmp_path / "data" / "eeg" / "00000.f32"
    assert cli.generate_main(["--models", str(tmp_path / "models"),
                              "--eeg", str(eeg_file), "--text", "a red circle",
                              "--steps", "5", "--w", "7.5", "--lambda", "1.0",
                              "--seed", "4", "--out", str(tmp_path / "gen")]) == 0
    assert (tmp_path / "gen" / "sample_000.png").exists()
    assert (tmp_path / "gen" / "config.json").exists()

    assert cli.evaluate_main(["--models", str(tmp_path / "models"),
                              "--data", str(manifest_path), "--split", "test",
                              "--steps", "5", "--out", str(tmp_path / "eval")]) == 0
    assert (tmp_path / "eval" / "eval_report.json").exists()


def test_cli_main_dispatch(capsys):
    assert cli.main([]) == 2


# ---------------------------------------------------------------------------
# micro ablation smoke (real suites run in the acceptance module)

def test_ablation_injector_micro(tiny_refs, tmp_path):
    cfg = tiny_run_config(seed=12)
    cfg.dataset = sw.DatasetConfig(num_classes=2, num_colors=2, num_backgrounds=2,
                                   per_class=20, split_ratios=(0.7, 0.05, 0.25),
                                   seed=12, channels=16, timesteps=128)
    cfg.align.epochs = 1
    cfg.stage2 = pl.Stage2Config(warmup_steps=8, warmup_batch_size=8,
                                 adapter_steps=6, batch_size=8)
    cfg.eval = pl.EvalConfig(steps=4, oracle_epochs=6)
    cfg.__post_init__()
    report = pl.run_ablation("injector", cfg, out_dir=tmp_path / "abl", refs=tiny_refs)
    assert [r["variant"] for r in report["rows"]] == ["direct", "xattn", "film"]
    params = {r["variant"]: r["adapter_params"] for r in report["rows"]}
    assert params["direct"] == 0
    assert params["film"] < params["xattn"]
    assert (tmp_path / "abl" / "ablation_injector.json").exists()
    assert (tmp_path / "abl" / "ablation_injector.txt").exists()
