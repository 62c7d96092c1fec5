"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure,
4 acceptance-threshold failure.

Configuration precedence for ``train``: command-line flag > config file >
preset default.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import yaml

from .corpus import CorpusError, corpus_sizes, load_manifest, read_lines, write_lines
from .experiments import StageError
from .model import NumericalError
from .scheduling import NoiseSchedule, ScheduleError, TemperatureSchedule, schedule_table
from .tokenizer import SubwordVocab, VocabError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL, EXIT_THRESHOLD = 0, 1, 2, 3, 4

logger = logging.getLogger("mtlnmt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- prepare-data

def _encode_chunk(args):
    vocab_path, sentences = args
    from .tokenizer import encode

    vocab = SubwordVocab.load(vocab_path)
    return [encode(s, vocab).ids for s in sentences]


def _chunks(items, n):
    size = max(1, -(-len(items) // n))
    return [items[i : i + size] for i in range(0, len(items), size)]


def cmd_prepare_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.toy:
        from .experiments import PRESETS, derive_seed
        from .synthetic import ToySetup, build_toy_corpora

        if args.toy not in PRESETS:
            raise UsageError(f"unknown preset {args.toy!r}; choose from {sorted(PRESETS)}")
        setup = ToySetup(**{**PRESETS[args.toy].setup, "seed": derive_seed(args.seed, "corpus")})
        data = build_toy_corpora(setup, out)
        for key, pairs in data["valid"].items():
            src, tgt = key.split("-")
            write_lines(out / f"valid.{key}.{src}", [s for s, _ in pairs])
            write_lines(out / f"valid.{key}.{tgt}", [t for _, t in pairs])
        for lang, sents in data["test"].items():
            write_lines(out / f"test.{lang}", sents)
        manifest_path = data["manifest"]
        print(f"wrote toy corpora and {manifest_path}")
    else:
        if not args.manifest:
            raise UsageError("prepare-data needs --manifest or --toy")
        manifest_path = Path(args.manifest)
    manifest = load_manifest(manifest_path)
    from .trainer import vocab_from_manifest

    vocab = vocab_from_manifest(manifest, args.vocab_size)
    vocab_path = out / "vocab.txt"
    vocab.save(vocab_path)
    sentences = [s for b in manifest.bitext for pair in b.pairs for s in pair]
    sentences += [s for m in manifest.mono for s in m.sentences]
    jobs = [(str(vocab_path), c) for c in _chunks(sentences, args.workers)]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            encoded = [ids for part in pool.map(_encode_chunk, jobs) for ids in part]
    else:
        encoded = [ids for job in jobs for ids in _encode_chunk(job)]
    stats = {
        "pairs": corpus_sizes(manifest),
        "mono": {f"{m.lang}:{m.side}": len(m.sentences) for m in manifest.mono},
        "vocab_size": len(vocab),
        "tokens": sum(len(ids) for ids in encoded),
        "unk_tokens": sum(ids.count(vocab.unk_id) for ids in encoded),
    }
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True))
    if args.dump_noised:
        _dump_noised(manifest, vocab, args, out / "noised.jsonl")
    print(json.dumps(stats, sort_keys=True))
    return EXIT_OK


def _dump_noised(manifest, vocab, args, path: Path) -> None:
    from .noising import DaeConfig, MlmConfig, make_dae_example, mask_mlm, sentence_rng
    from .tokenizer import encode

    lines = []
    index = 0
    for lang, sents in manifest.mlm_pools().items():
        for s in sents[: args.dump_noised]:
            lines.append(mask_mlm(encode(s, vocab), MlmConfig(), sentence_rng(args.seed, index), vocab).to_json(vocab))
            index += 1
    for lang, sents in manifest.dae_pools().items():
        for s in sents[: args.dump_noised]:
            ex = make_dae_example(encode(s, vocab), DaeConfig(), lang, sentence_rng(args.seed, index), vocab)
            lines.append(ex.to_json(vocab))
            index += 1
    write_lines(path, lines)


# ---------------------------------------------------------------- train

def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def build_train_config(preset: str | None, config_path: str | None, seed: int | None, updates: int | None):
    from .experiments import BASE_TRAIN, PRESETS, TRAIN_PRESETS, derive_seed
    from .trainer import TrainConfig

    d: dict = {}
    if preset in TRAIN_PRESETS:
        d = json.loads(json.dumps(TRAIN_PRESETS[preset]))
    elif preset in PRESETS:
        p = PRESETS[preset]
        d = _merge(json.loads(json.dumps(BASE_TRAIN)), p.train)
        d["tasks"] = list(p.tasks)
        d.setdefault("optim", {})["max_updates"] = p.updates
    elif preset:
        raise UsageError(f"unknown preset {preset!r}; choose from {sorted(TRAIN_PRESETS) + sorted(PRESETS)}")
    if config_path:
        loaded = yaml.safe_load(Path(config_path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise UsageError(f"config {config_path} must be a mapping")
        d = _merge(d, loaded)
    if seed is not None:
        d.setdefault("optim", {})["seed"] = derive_seed(seed, "trainer")
    if updates is not None:
        d.setdefault("optim", {})["max_updates"] = updates
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad training config: {e}") from e


def _read_valid(specs) -> dict:
    valid = {}
    for spec in specs or []:
        parts = spec.split(":")
        if len(parts) != 3:
            raise UsageError(f"bad --valid {spec!r}; expected KEY:SRC:TGT")
        key, src_file, tgt_file = parts
        src, tgt = read_lines(src_file), read_lines(tgt_file)
        if len(src) != len(tgt):
            raise CorpusError(f"validation files for {key} are not aligned")
        valid[key] = list(zip(src, tgt))
    return valid


def cmd_train(args) -> int:
    from .trainer import Trainer

    manifest = load_manifest(args.manifest)
    cfg = build_train_config(args.preset, args.config, args.seed, args.updates)
    if args.checkpoint_every is not None:
        cfg.checkpoint_every = args.checkpoint_every
    if args.eval_every is not None:
        cfg.eval_every = args.eval_every
    vocab = SubwordVocab.load(args.vocab) if args.vocab else None
    valid = _read_valid(args.valid)
    if args.resume:
        # the checkpoint carries its own config; only the update budget may change
        trainer = Trainer.resume(args.resume, manifest, valid=valid, out_dir=args.out)
        if args.updates is not None:
            trainer.config.optim.max_updates = args.updates
    else:
        trainer = Trainer(manifest, cfg, vocab=vocab, valid=valid, out_dir=args.out)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "config.yaml").write_text(yaml.safe_dump(trainer.config.to_dict()))
    trainer.vocab.save(Path(args.out) / "vocab.txt")

    def report(rec):
        if rec["step"] % args.log_every == 0:
            logger.info("step %d k %d T %.3f L_MT %.4f L_MLM %.4f L_DAE %.4f lr %.2e", rec["step"], rec["k"], rec["T"],
                        rec["L_MT"], rec["L_MLM"], rec["L_DAE"], rec["lr"])

    trainer.train(callback=report)
    print(Path(args.out) / "checkpoint_last.pt")
    return EXIT_OK


# ---------------------------------------------------------------- backtranslate / translate / score-bleu

def _decode_cfg(args):
    from .evaluate import DecodeConfig

    try:
        return DecodeConfig(beam_size=args.beam, length_penalty=args.alpha, penalty_style=args.penalty_style)
    except ValueError as e:
        raise UsageError(str(e)) from e


def cmd_backtranslate(args) -> int:
    from .trainer import generate_back_translations, load_model

    model, vocab = load_model(args.model)
    mono = read_lines(args.mono)
    for lang in (args.mono_lang, args.synth_lang):
        if lang not in vocab.languages:
            raise UsageError(f"language {lang!r} unknown to the model ({vocab.languages})")
    corpus, skipped = generate_back_translations(
        model, vocab, mono, args.mono_lang, args.synth_lang, _decode_cfg(args), seed=args.seed
    )
    write_lines(f"{args.out}.{args.synth_lang}", [s for s, _ in corpus.pairs])
    write_lines(f"{args.out}.{args.mono_lang}", [t for _, t in corpus.pairs])
    print(json.dumps({"pairs": corpus.size, "skipped": skipped}))
    return EXIT_OK


def cmd_translate(args) -> int:
    from .evaluate import translate
    from .trainer import load_model

    model, vocab = load_model(args.model)
    if args.tgt_lang not in vocab.languages:
        raise UsageError(f"target language {args.tgt_lang!r} unknown to the model ({vocab.languages})")
    hyps = translate(model, vocab, read_lines(args.src), args.tgt_lang, _decode_cfg(args))
    if args.out:
        write_lines(args.out, hyps)
    else:
        for h in hyps:
            print(h)
    return EXIT_OK


def cmd_score_bleu(args) -> int:
    from .evaluate import bleu

    hyps, refs = read_lines(args.hyp), read_lines(args.ref)
    try:
        report = bleu(hyps, refs)
    except ValueError as e:
        raise CorpusError(str(e)) from e
    if args.json:
        print(json.dumps(vars(report)))
    else:
        print(report)
    return EXIT_OK


# ---------------------------------------------------------------- inspect-schedule

def _parse_sizes(text: str) -> dict:
    sizes = {}
    for item in text.split(","):
        key, _, n = item.partition("=")
        if not n:
            raise UsageError(f"bad --sizes item {item!r}; expected key=count")
        sizes[key.strip()] = int(n)
    return sizes


def cmd_inspect_schedule(args) -> int:
    if args.manifest:
        sizes = corpus_sizes(load_manifest(args.manifest))
    elif args.sizes:
        sizes = _parse_sizes(args.sizes)
    else:
        raise UsageError("inspect-schedule needs --manifest or --sizes")
    temp = TemperatureSchedule(args.T0, args.Tm, args.N)
    mlm = NoiseSchedule(args.mlm_R0, args.mlm_Rm, args.mlm_M, "mlm_mask")
    dae = NoiseSchedule(args.dae_R0, args.dae_Rm, args.dae_M, "dae_infill")
    if args.config:
        cfg = build_train_config(None, args.config, None, None)
        temp = cfg.temperature
        mlm = cfg.mlm_schedule or NoiseSchedule(cfg.mlm.mask_ratio, cfg.mlm.mask_ratio, 1, "mlm_mask")
        dae = cfg.dae_schedule or NoiseSchedule(cfg.dae.infill_ratio, cfg.dae.infill_ratio, 1, "dae_infill")
    rows = schedule_table(temp, sizes, args.epochs, mlm, dae)
    cols = list(rows[0])
    if args.format == "json":
        print(json.dumps(rows))
    elif args.format in ("tsv", "csv"):
        sep = "\t" if args.format == "tsv" else ","
        print(sep.join(cols))
        for r in rows:
            print(sep.join(repr(r[c]) for c in cols))
    else:
        cells = [cols] + [[f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in cols] for r in rows]
        widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
        for row in cells:
            print("  ".join(c.rjust(w) for c, w in zip(row, widths)))
    return EXIT_OK


# ---------------------------------------------------------------- run-experiment

def cmd_run_experiment(args) -> int:
    from .experiments import PRESETS, check_thresholds, run_experiment, summary_table

    names = list(PRESETS) if args.preset == "all" else [args.preset]
    for n in names:
        if n not in PRESETS:
            raise UsageError(f"unknown preset {n!r}; choose from {sorted(PRESETS)} or 'all'")
    seeds = args.seeds or [args.seed]
    out = Path(args.out)
    results, failures = [], []
    cache: dict = {}

    def run(name, seed):
        if (name, seed) not in cache:
            cache[name, seed] = run_experiment(name, seed, out_dir=out / f"{name}-seed{seed}", updates=args.updates)
            results.append(cache[name, seed])
        return cache[name, seed]

    for name in names:
        p = PRESETS[name]
        for seed in seeds:
            r = run(name, seed)
            if p.thresholds and not args.no_check:
                base = run(p.baseline, seed) if p.baseline else None
                checks = check_thresholds(r, base, p.thresholds)
                r["checks"] = checks
                failures += [f"{name} seed {seed}: {c}" for c, ok in checks.items() if not ok]
    table = summary_table(results)
    print(table)
    (out / "summary.txt").write_text(table + "\n")
    (out / "summary.json").write_text(json.dumps(results, indent=2, sort_keys=True))
    if failures:
        for f in failures:
            print(f"THRESHOLD FAILED: {f}", file=sys.stderr)
        return EXIT_THRESHOLD
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mtlnmt", description="Multi-task multilingual NMT toolkit (desk scale).",
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("prepare-data", help="filter, learn the subword vocabulary, tokenize; or build toy corpora")
    p.add_argument("--manifest", help="corpus manifest (YAML)")
    p.add_argument("--toy", metavar="PRESET", help="generate the synthetic corpora of a preset instead")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--vocab-size", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1, help="processes used for tokenization")
    p.add_argument("--dump-noised", type=int, default=0, metavar="N",
                   help="also write N noised examples per pool to noised.jsonl")
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("train", help="joint MT + MLM + DAE training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="training config (YAML); overrides preset values")
    p.add_argument("--preset", help="start from a training preset (desk, large) or an experiment preset's config")
    p.add_argument("--seed", type=int, help="single source of all randomness")
    p.add_argument("--out", required=True, help="run directory (metrics.jsonl, checkpoints)")
    p.add_argument("--updates", type=int, help="number of parameter updates")
    p.add_argument("--vocab", help="reuse an existing vocab file")
    p.add_argument("--valid", action="append", metavar="KEY:SRC:TGT", help="validation pair files, e.g. xa-en:v.xa:v.en")
    p.add_argument("--eval-every", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    def decode_flags(p):
        p.add_argument("--beam", type=int, default=5)
        p.add_argument("--alpha", type=float, default=1.0, help="length penalty exponent")
        p.add_argument("--penalty-style", choices=["simple", "gnmt"], default="simple")

    p = sub.add_parser("backtranslate", help="decode target-side monolingual text into synthetic sources")
    p.add_argument("--model", required=True, help="reverse-direction checkpoint")
    p.add_argument("--mono", required=True, help="monolingual file, one sentence per line")
    p.add_argument("--out", required=True, help="output prefix; writes PREFIX.<lang> for both sides")
    p.add_argument("--mono-lang", required=True, help="language of --mono (target side of the synthetic pairs)")
    p.add_argument("--synth-lang", required=True, help="language to translate into (synthetic source side)")
    p.add_argument("--seed", type=int, default=0, help="shuffle seed")
    decode_flags(p)
    p.set_defaults(func=cmd_backtranslate)

    p = sub.add_parser("translate", help="beam-search translation")
    p.add_argument("--model", required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--tgt-lang", required=True)
    p.add_argument("--out", help="output file (default stdout)")
    decode_flags(p)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("score-bleu", help="corpus BLEU (13a tokenization, case-sensitive)")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--json", action="store_true", help="machine-readable report")
    p.set_defaults(func=cmd_score_bleu)

    p = sub.add_parser("inspect-schedule", help="print T(k), R(k) and pair sampling probabilities per epoch")
    p.add_argument("--manifest")
    p.add_argument("--sizes", help="pair sizes, e.g. fr-en=1000,gu-en=8")
    p.add_argument("--config", help="take schedules from a training config")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--T0", type=float, default=1.0)
    p.add_argument("--Tm", type=float, default=5.0)
    p.add_argument("--N", type=int, default=5)
    p.add_argument("--mlm-R0", type=float, default=0.10)
    p.add_argument("--mlm-Rm", type=float, default=0.20)
    p.add_argument("--mlm-M", type=int, default=5)
    p.add_argument("--dae-R0", type=float, default=0.20)
    p.add_argument("--dae-Rm", type=float, default=0.40)
    p.add_argument("--dae-M", type=int, default=5)
    p.add_argument("--format", choices=["table", "tsv", "csv", "json"], default="table",
                   help="tsv/csv/json are machine-readable")
    p.set_defaults(func=cmd_inspect_schedule)

    p = sub.add_parser("run-experiment", help="run toy presets end to end and check thresholds")
    p.add_argument("--preset", required=True, help="preset name or 'all'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, nargs="+", help="several seeds (overrides --seed)")
    p.add_argument("--out", required=True)
    p.add_argument("--updates", type=int, help="override the preset's update count")
    p.add_argument("--no-check", action="store_true", help="skip threshold checks")
    p.set_defaults(func=cmd_run_experiment)

    parser.epilog = "subcommands:\n" + "\n".join(
        "  " + sp.format_usage().replace("usage: ", "").strip() for sp in sub.choices.values()
    )
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if not args.command:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (CorpusError, VocabError, ScheduleError, FileNotFoundError, yaml.YAMLError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except StageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_NUMERICAL if isinstance(e.__cause__, NumericalError) else EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
