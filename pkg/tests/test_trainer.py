import json

import numpy as np
import pytest
import torch

from conftest import COPY_CONFIG, write_copy_manifest
from mtlnmt.corpus import load_manifest
from mtlnmt.evaluate import DecodeConfig, teacher_forced_accuracy
from mtlnmt.model import NumericalError
from mtlnmt.noising import DAE, MLM, MT, make_mt_example
from mtlnmt.scheduling import noise_ratio_at, pair_sampling_probs, schedule_table, temperature_at
from mtlnmt.tokenizer import encode
from mtlnmt.trainer import (
    OptimConfig,
    TrainConfig,
    Trainer,
    build_optimizer,
    generate_back_translations,
    load_model,
    lr_at,
    merge_synthetic,
    set_lr,
)
from oracles import adam_scalar_oracle

SMALL = dict(
    tasks=["MT", "MLM", "DAE"],
    vocab_size=60,
    batch_tokens=60,
    model=dict(layers_enc=1, layers_dec=1, d_model=16, d_ff=32, heads=2, dropout=0.1),
    optim=dict(accumulation=2, warmup_steps=10, peak_lr=1e-3, max_updates=20, seed=3),
    mlm_schedule=dict(R0=0.1, Rm=0.2, M=2),
    dae_schedule=dict(R0=0.2, Rm=0.4, M=2),
    temperature=dict(T0=1, Tm=5, N=2),
)


@pytest.fixture
def manifest(tmp_path):
    path, _ = write_copy_manifest(tmp_path)
    return load_manifest(path)


def small_config(**overrides):
    d = json.loads(json.dumps(SMALL))
    for k, v in overrides.items():
        if isinstance(v, dict) and isinstance(d.get(k), dict):
            d[k].update(v)
        else:
            d[k] = v
    return TrainConfig.from_dict(d)


def test_lr_examples():
    cfg = OptimConfig(peak_lr=5e-4, warmup_steps=400)
    assert lr_at(400, cfg) == pytest.approx(5e-4, abs=1e-18)
    assert lr_at(200, cfg) == pytest.approx(2.5e-4, abs=1e-18)
    assert lr_at(1600, cfg) == pytest.approx(2.5e-4, abs=1e-18)
    with pytest.raises(ValueError):
        lr_at(0, cfg)


def test_optim_config_validation():
    with pytest.raises(ValueError):
        OptimConfig(beta1=1.0)
    with pytest.raises(ValueError):
        OptimConfig(peak_lr=0)


def test_adam_matches_scalar_oracle():
    cfg = OptimConfig(peak_lr=1e-2, warmup_steps=5)
    rng = np.random.default_rng(0)
    grads = [float(g) for g in rng.normal(size=30)]
    p = torch.nn.Parameter(torch.tensor(0.7, dtype=torch.float64))
    opt = build_optimizer([p], cfg)
    got = []
    for t, g in enumerate(grads, start=1):
        p.grad = torch.tensor(g, dtype=torch.float64)
        set_lr(opt, lr_at(t, cfg))
        opt.step()
        got.append(p.item())
    want = adam_scalar_oracle(grads, lambda t: lr_at(t, cfg), cfg.beta1, cfg.beta2, cfg.adam_eps, 0.7)
    assert max(abs(a - b) for a, b in zip(got, want)) < 1e-12


def test_accumulation_equals_big_batch(manifest):
    cfg = small_config(dtype="float64", model=dict(dropout=0.0))
    tr = Trainer(manifest, cfg)
    raw = [tr.mixer.next_batches() for _ in range(4)]
    micro = [{b.task: tr._collate(b) for b in batches} for batches in raw]
    tr.model.zero_grad()
    tr.accumulate(micro)
    g_micro = [p.grad.clone() for p in tr.model.parameters()]

    merged = {}
    for batches in raw:
        for b in batches:
            merged.setdefault(b.task, []).extend(b.examples)
    big = {}
    for task, examples in merged.items():
        b = raw[0][[x.task for x in raw[0]].index(task)]
        big[task] = tr._collate(type(b)(task, examples, []))
    tr.model.zero_grad()
    tr.accumulate([big])
    for a, b in zip(g_micro, (p.grad for p in tr.model.parameters())):
        assert torch.allclose(a, b, rtol=0, atol=1e-6)


def test_train_logs_required_fields(manifest, tmp_path):
    tr = Trainer(manifest, small_config(), out_dir=tmp_path / "run")
    tr.train(5)
    lines = (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 5
    rec = json.loads(lines[-1])
    for key in ("step", "k", "T", "R_mlm", "R_dae", "L_MT", "L_MLM", "L_DAE", "lr"):
        assert key in rec
    assert rec["lr"] == lr_at(5, tr.config.optim)
    assert (tmp_path / "run" / "checkpoint_last.pt").exists()


def test_epoch_counter_drives_schedules(manifest):
    tr = Trainer(manifest, small_config())
    log = tr.train(20)
    ks = [r["k"] for r in log]
    assert ks[0] == 1 and ks[-1] > 1
    assert all(b >= a for a, b in zip(ks, ks[1:]))
    table = {r["k"]: r for r in schedule_table(tr.config.temperature, tr.sizes, max(ks),
                                               tr.config.mlm_schedule, tr.config.dae_schedule)}
    for r in log:
        assert r["T"] == table[r["k"]]["T"] == temperature_at(tr.config.temperature, r["k"])
        assert r["R_mlm"] == noise_ratio_at(tr.config.mlm_schedule, r["k"])
        assert r["R_dae"] == table[r["k"]]["R_dae"]


def test_deterministic_runs(manifest, tmp_path):
    a = Trainer(manifest, small_config(), out_dir=tmp_path / "a")
    b = Trainer(manifest, small_config(), out_dir=tmp_path / "b")
    a.train(12)
    b.train(12)
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()


def test_resume_replays_exactly(manifest, tmp_path):
    full = Trainer(manifest, small_config())
    full.train(16)
    part = Trainer(manifest, small_config(), out_dir=tmp_path / "p")
    part.train(8)
    resumed = Trainer.resume(tmp_path / "p" / "checkpoint_last.pt", manifest)
    resumed.train(16)
    assert resumed.log == full.log
    for x, y in zip(resumed.model.parameters(), full.model.parameters()):
        assert torch.equal(x, y)


def test_validation_tracks_best_checkpoint(tmp_path):
    path, sents = write_copy_manifest(tmp_path)
    valid = {"xx-en": [(s, s) for s in sents[:5]]}
    cfg = small_config(eval_every=5)
    tr = Trainer(load_manifest(path), cfg, valid=valid, out_dir=tmp_path / "run")
    tr.train(10)
    rec = tr.log[4]
    assert "valid_L_MT" in rec and "valid_acc[xx-en]" in rec
    assert (tmp_path / "run" / "checkpoint_best.pt").exists()
    model, vocab = load_model(tmp_path / "run" / "checkpoint_last.pt")
    assert vocab.tokens == tr.vocab.tokens
    for x, y in zip(model.parameters(), tr.model.parameters()):
        assert torch.equal(x, y)


def test_nan_aborts_with_dump(manifest, tmp_path):
    tr = Trainer(manifest, small_config(), out_dir=tmp_path / "run")
    tr.train(2)
    with torch.no_grad():
        for p in tr.model.parameters():
            p.fill_(float("nan"))
    with pytest.raises(NumericalError):
        tr.train(4)
    dump = json.loads((tmp_path / "run" / "numerical_failure.json").read_text())
    assert dump["step"] == 2


def test_copy_task_overfits(copy_trainer):
    v = copy_trainer.vocab
    ex = [make_mt_example(encode(s, v), encode(s, v), "en", v) for s in copy_trainer.copy_sentences]
    assert teacher_forced_accuracy(copy_trainer.model, ex, v) >= 0.99
    assert copy_trainer.step <= 1000


def test_smoothed_loss_nonincreasing_after_warmup(copy_trainer):
    losses = [r["L_MT"] for r in copy_trainer.log]
    warm = copy_trainer.config.optim.warmup_steps
    means = [np.mean(losses[i : i + 100]) for i in range(warm, len(losses) - 99, 50)]
    assert all(b <= a for a, b in zip(means, means[1:]))


def test_back_translation_empty_mono(copy_trainer):
    corpus, skipped = generate_back_translations(copy_trainer.model, copy_trainer.vocab, [], "en", "en")
    assert corpus.pairs == [] and skipped == 0


def test_back_translation_copy_model(copy_trainer):
    mono = copy_trainer.copy_sentences[:10]
    # the copy model only knows the [LID_en] tag, so it "translates" into en
    corpus, skipped = generate_back_translations(
        copy_trainer.model, copy_trainer.vocab, mono, "en", "en", DecodeConfig(beam_size=2)
    )
    assert skipped == 0
    assert all(src == tgt for src, tgt in corpus.pairs)
    assert corpus.size == len(mono) - skipped
    assert sorted(t for _, t in corpus.pairs) == sorted(mono)
    assert corpus.key == "en-en"


def test_back_translation_counts_skips(copy_trainer):
    # a sentence of characters the vocabulary has never seen decodes to nothing usable or to UNKs
    mono = copy_trainer.copy_sentences[:3] + ["zzzz qqqq"]
    corpus, skipped = generate_back_translations(copy_trainer.model, copy_trainer.vocab, mono, "en", "xx",
                                                 DecodeConfig(beam_size=1))
    assert corpus.size + skipped == len(mono)


def test_merge_synthetic_shuffles_into_pool(copy_trainer, manifest):
    mono = copy_trainer.copy_sentences[:5]
    synth, _ = generate_back_translations(copy_trainer.model, copy_trainer.vocab, mono, "en", "xx",
                                          DecodeConfig(beam_size=1))
    merged = merge_synthetic(manifest, [synth], seed=0)
    sizes = {b.key: b.size for b in merged.bitext}
    assert sizes["xx-en"] == manifest.bitext[0].size + synth.size
    assert sorted(merged.bitext[0].pairs) == sorted(manifest.bitext[0].pairs + synth.pairs)
