"""Command-line entry point for the whole pipeline.

Subcommands cover data generation, MLM pretraining, multilingual fine-tuning,
decoding, BLEU scoring, checkpoint averaging, the three probes, and the
packaged ablation recipes. Runs are configured by a JSON file (unknown keys
rejected, defaults materialized) with command-line flags taking precedence;
every run directory gets a resolved config snapshot, checkpoints/, logs/, and
reports/ so results are reproducible from the snapshot alone.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import experiments
from .checkpoint import load_checkpoint, model_from_checkpoint, save_checkpoint
from .corpus import (SamplingSchedule, Vocabulary, load_monolingual,
                     load_parallel)
from .errors import CheckpointError, UsageError
from .evaluate import BeamParams, bleu, translate_corpus_full
from .initialize import InitStrategy, initialize
from .model import ModelConfig
from .probe import (alignment_error_rate, classify_probe, probe_parse,
                    read_conllu)
from .toydata import make_toy_data
from .train import (TrainConfig, average_checkpoints, backtranslate,
                    pretrain_mlm, train, write_parallel_tsv)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

CONFIG_DEFAULTS = {
    "model": {
        "encoder_layers": 4, "decoder_layers": 2, "hidden": 64, "heads": 4,
        "ffn_dim": 128, "vocab_size": None, "max_positions": 32,
        "post_layernorm": True, "embed_layernorm": True,
        "scale_embeddings": False, "activation": "gelu", "tie_embeddings": True,
        "dropout": 0.1, "attention_dropout": 0.0,
    },
    "train": {
        "max_steps": 3000, "batch_size": 32, "gradient_accumulation": 1,
        "label_smoothing": 0.1, "peak_lr": 3e-4, "warmup_steps": 4000,
        "checkpoint_interval": 500, "seed": 1,
    },
    "sampling": {"t0": 1.0, "t_peak": 5.0, "warmup_epochs": 5},
    "data": {"dir": None, "vocab": None, "directions": None},
    "init": {"strategy": "random", "cross_attention": "share",
             "layer_map": "bottom", "source": None},
    "beam": {"beam_size": 5, "length_penalty": 1.0, "max_decode_len": 32},
}


def _merge_section(name, defaults, provided):
    unknown = set(provided) - set(defaults)
    if unknown:
        raise UsageError(f"unknown config key(s) in [{name}]: {', '.join(sorted(unknown))}")
    merged = dict(defaults)
    merged.update(provided)
    return merged


def load_run_config(path=None, overrides=None) -> dict:
    provided = {}
    if path is not None:
        if not os.path.exists(path):
            raise UsageError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            try:
                provided = json.load(fh)
            except json.JSONDecodeError as exc:
                raise UsageError(f"config is not valid JSON: {exc}") from None
    unknown = set(provided) - set(CONFIG_DEFAULTS)
    if unknown:
        raise UsageError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    config = {name: _merge_section(name, defaults, provided.get(name, {}))
              for name, defaults in CONFIG_DEFAULTS.items()}
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        config[section][key] = value
    return config


def _resolve_vocab(config) -> Vocabulary:
    path = config["data"]["vocab"]
    if path is None:
        data_dir = config["data"]["dir"]
        if data_dir is None:
            raise UsageError("config field data.vocab (or data.dir) is required")
        path = os.path.join(data_dir, "vocab.txt")
    if not os.path.exists(path):
        raise UsageError(f"config field data.vocab points nowhere: {path}")
    return Vocabulary.load(path)


def _require_data_dir(config) -> str:
    data_dir = config["data"]["dir"]
    if data_dir is None:
        raise UsageError("config field data.dir is required")
    if not os.path.isdir(data_dir):
        raise UsageError(f"config field data.dir is not a directory: {data_dir}")
    return data_dir


def _model_config(config, vocab, decoder_layers=None) -> ModelConfig:
    kw = dict(config["model"])
    kw["vocab_size"] = kw["vocab_size"] or len(vocab)
    if kw["vocab_size"] != len(vocab):
        raise UsageError(
            f"model.vocab_size {kw['vocab_size']} != vocabulary size {len(vocab)}")
    if decoder_layers is not None:
        kw["decoder_layers"] = decoder_layers
    return ModelConfig(**kw).validate()


def _train_config(config) -> TrainConfig:
    return TrainConfig(schedule=SamplingSchedule(**config["sampling"]).validate(),
                       **config["train"]).validate()


def _beam_params(config_or_args) -> BeamParams:
    if isinstance(config_or_args, dict):
        return BeamParams(**config_or_args["beam"]).validate()
    args = config_or_args
    return BeamParams(args.beam_size, args.length_penalty, args.max_decode_len).validate()


def _snapshot(out_dir, config) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for sub in ("checkpoints", "logs", "reports"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _init_model(config, vocab, decoder_layers=None):
    init = config["init"]
    strategy = InitStrategy(init["strategy"] if init["strategy"] != "encoder_only"
                            else "encoder",
                            init["cross_attention"], init["layer_map"]).validate()
    source = None
    if strategy.variant != "random":
        if not init["source"]:
            raise UsageError("config field init.source is required for this strategy")
        source = load_checkpoint(init["source"])
    model_cfg = _model_config(config, vocab, decoder_layers)
    return initialize(model_cfg, strategy, source, seed=config["train"]["seed"])


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------

def _cmd_make_toy_data(args) -> int:
    make_toy_data(args.out_dir, args.languages, args.sizes, seed=args.seed,
                  dev_size=args.dev_size, mono_size=args.mono_size)
    print(f"toy corpus written to {args.out_dir}")
    return EXIT_OK


def _cmd_pretrain(args) -> int:
    config = load_run_config(args.config, _overrides(args))
    data_dir = _require_data_dir(config)
    vocab = _resolve_vocab(config)
    _snapshot(args.out_dir, config)
    model = _init_model(config, vocab, decoder_layers=0)
    langs = list(vocab.languages)
    mono = {lang: load_monolingual(data_dir, lang) for lang in langs}
    result = pretrain_mlm(model, mono, vocab, _train_config(config), out_dir=args.out_dir)
    final = os.path.join(args.out_dir, "checkpoints", "final.ckpt")
    save_checkpoint(model, final)
    print(f"pretrained encoder saved to {final} "
          f"(final loss {result.metrics[-1]['loss']:.4f})")
    return EXIT_OK


def _cmd_train(args) -> int:
    config = load_run_config(args.config, _overrides(args))
    data_dir = _require_data_dir(config)
    vocab = _resolve_vocab(config)
    _snapshot(args.out_dir, config)
    directions = config["data"]["directions"]
    if directions is not None:
        directions = [tuple(d.split("-")) for d in directions]
    model_cfg = _model_config(config, vocab)
    corpus = load_parallel(data_dir, directions,
                           max_tokens=model_cfg.max_positions - 2)
    model = _init_model(config, vocab)
    result = train(model, corpus, vocab, _train_config(config), out_dir=args.out_dir)
    print(f"trained {len(result.metrics)} steps; "
          f"checkpoints: {len(result.checkpoint_paths)}; "
          f"final loss {result.metrics[-1]['loss']:.4f}")
    return EXIT_OK


def _cmd_translate(args) -> int:
    ckpt = load_checkpoint(args.model)
    model = model_from_checkpoint(ckpt)
    vocab = Vocabulary.load(args.vocab)
    with open(args.input, encoding="utf-8") as fh:
        sentences = [line.rstrip("\n") for line in fh]
    params = _beam_params(args)
    results = translate_corpus_full(model, sentences, args.tgt_lang, vocab, params)
    with open(args.output, "w", encoding="utf-8") as fh:
        for text, hyp in results:
            if args.scores:
                fh.write(f"{text}\t{hyp.normalized:.6f}\n")
            else:
                fh.write(text + "\n")
    print(f"wrote {len(results)} translations to {args.output}")
    return EXIT_OK


def _cmd_backtranslate(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.model))
    vocab = Vocabulary.load(args.vocab)
    with open(args.mono, encoding="utf-8") as fh:
        mono = [line.rstrip("\n") for line in fh if line.strip()]
    pairs, dropped = backtranslate(model, mono, args.src_lang, args.tgt_lang,
                                   vocab, _beam_params(args))
    write_parallel_tsv(pairs, args.output)
    print(f"wrote {len(pairs)} synthetic pairs to {args.output} "
          f"({dropped} dropped)")
    return EXIT_OK


def _cmd_eval_bleu(args) -> int:
    with open(args.hyp, encoding="utf-8") as fh:
        hyps = [line.rstrip("\n").split() for line in fh]
    with open(args.ref, encoding="utf-8") as fh:
        refs = [line.rstrip("\n").split() for line in fh]
    print(f"BLEU = {bleu(hyps, refs):.2f}")
    return EXIT_OK


def _cmd_average(args) -> int:
    averaged = average_checkpoints(args.checkpoints)
    save_checkpoint(averaged, args.output)
    print(f"averaged {len(args.checkpoints)} checkpoints into {args.output}")
    return EXIT_OK


def _report(out_dir, name, payload) -> None:
    if out_dir is None:
        return
    os.makedirs(os.path.join(out_dir, "reports"), exist_ok=True)
    path = os.path.join(out_dir, "reports", f"{name}.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"report written to {path}")


def _cmd_probe_align(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.model))
    vocab = Vocabulary.load(args.vocab)
    with open(args.src_file, encoding="utf-8") as fh:
        src = [line.rstrip("\n") for line in fh if line.strip()]
    with open(args.tgt_file, encoding="utf-8") as fh:
        tgt = [line.rstrip("\n") for line in fh if line.strip()]
    with open(args.gold, encoding="utf-8") as fh:
        gold = [line.rstrip("\n") for line in fh]
    if not len(src) == len(tgt) == len(gold):
        raise UsageError("source, target, and gold files must align line by line")
    mode = "char" if args.char_mode else "word"
    report = alignment_error_rate(model, list(zip(src, tgt)), gold,
                                  args.src_lang, args.tgt_lang, vocab,
                                  layer=args.layer, iterations=args.iterations,
                                  mode=mode)
    print(f"AER = {report['aer']:.4f} over {report['sentences']} sentence pairs")
    _report(args.out_dir, "alignment", report)
    return EXIT_OK


def _cmd_probe_parse(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.model))
    vocab = Vocabulary.load(args.vocab)
    sentences = read_conllu(args.conllu)
    report = probe_parse(model, sentences, vocab, args.lang)
    for layer, score in enumerate(report["per_layer"]):
        print(f"layer {layer}: UAS {score:.4f}")
    print(f"best layer {report['best_layer']} (UAS {report['best_uas']:.4f})")
    _report(args.out_dir, "dependency", report)
    return EXIT_OK


def _read_cls(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            prem, hyp, label = line.rstrip("\n").split("\t")
            rows.append((prem, hyp, label))
    return rows


def _cmd_probe_classify(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.model))
    vocab = Vocabulary.load(args.vocab)
    report = classify_probe(model, _read_cls(args.train_file), _read_cls(args.dev_file),
                            vocab, args.lang, steps=args.steps,
                            finetune_encoder=args.finetune_encoder, seed=args.seed or 0)
    print(f"classification accuracy = {report['accuracy']:.4f} "
          f"({report['eval_size']} held-out examples)")
    _report(args.out_dir, "classification", report)
    return EXIT_OK


def _cmd_experiment(args) -> int:
    settings = experiments.ToySettings(
        seeds=tuple(args.seeds), pretrain_steps=args.pretrain_steps,
        finetune_steps=args.finetune_steps, data_seed=args.data_seed)
    if args.recipe == "table5-toy":
        results = experiments.run_table5(args.out_dir, settings)
        rows = results["rows"]
    else:
        results = experiments.run_table4(args.out_dir, settings,
                                         pretrained=args.pretrained)
        rows = results["rows"]
    name = "table5" if args.recipe == "table5-toy" else "table4"
    with open(os.path.join(args.out_dir, "reports", f"{name}.txt"),
              encoding="utf-8") as fh:
        print(fh.read(), end="")
    print(f"{len(rows)} rows; reports under {os.path.join(args.out_dir, 'reports')}")
    return EXIT_OK


def _overrides(args) -> dict:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = args.seed
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        if "." not in dotted:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        section, key = dotted.split(".", 1)
        if section not in CONFIG_DEFAULTS or key not in CONFIG_DEFAULTS[section]:
            raise UsageError(f"unknown config field: {dotted}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        overrides[dotted] = value
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mnmt",
        description="Desk-scale multilingual NMT: pretraining, fine-tuning, "
                    "decoding, and probing.")
    parser.add_argument("--threads", type=int, default=1,
                        help="thread budget for parallelizable stages")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run_flags(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--out-dir", required=True)
        p.add_argument("--seed", type=int, help="overrides train.seed")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override any config field; repeatable")

    def add_beam_flags(p):
        p.add_argument("--beam-size", type=int, default=5)
        p.add_argument("--length-penalty", type=float, default=1.0)
        p.add_argument("--max-decode-len", type=int, default=32)

    p = sub.add_parser("make-toy-data", help="generate the cipher corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--languages", nargs="+", default=list(experiments.TOY_LANGUAGES))
    p.add_argument("--sizes", nargs="+", type=int, default=list(experiments.TOY_SIZES))
    p.add_argument("--seed", type=int, default=13)
    p.add_argument("--dev-size", type=int, default=200)
    p.add_argument("--mono-size", type=int, default=5000)
    p.set_defaults(handler=_cmd_make_toy_data)

    p = sub.add_parser("pretrain", help="MLM-pretrain an encoder")
    add_run_flags(p)
    p.set_defaults(handler=_cmd_pretrain)

    p = sub.add_parser("train", help="fine-tune on multilingual parallel data")
    add_run_flags(p)
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("translate", help="beam-decode a file of sentences")
    p.add_argument("--model", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--tgt-lang", required=True)
    p.add_argument("--scores", action="store_true",
                   help="append the normalized beam score as a second column")
    add_beam_flags(p)
    p.set_defaults(handler=_cmd_translate)

    p = sub.add_parser("backtranslate",
                       help="synthesize parallel data from monolingual text")
    p.add_argument("--model", required=True, help="reverse-direction model")
    p.add_argument("--vocab", required=True)
    p.add_argument("--mono", required=True, help="target-language sentences")
    p.add_argument("--src-lang", required=True)
    p.add_argument("--tgt-lang", required=True)
    p.add_argument("--output", required=True)
    add_beam_flags(p)
    p.set_defaults(handler=_cmd_backtranslate)

    p = sub.add_parser("eval-bleu", help="corpus BLEU of a hypothesis file")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.set_defaults(handler=_cmd_eval_bleu)

    p = sub.add_parser("average-checkpoints", help="elementwise-mean checkpoints")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(handler=_cmd_average)

    p = sub.add_parser("probe-align", help="word-alignment probe (IterMax + AER)")
    p.add_argument("--model", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--src-file", required=True)
    p.add_argument("--tgt-file", required=True)
    p.add_argument("--gold", required=True, help="Pharaoh-format gold alignments")
    p.add_argument("--src-lang", required=True)
    p.add_argument("--tgt-lang", required=True)
    p.add_argument("--layer", type=int, default=-1)
    p.add_argument("--iterations", type=int, default=2)
    p.add_argument("--char-mode", action="store_true",
                   help="character subwords instead of whitespace tokens")
    p.add_argument("--out-dir")
    p.set_defaults(handler=_cmd_probe_align)

    p = sub.add_parser("probe-parse", help="attention MST dependency probe")
    p.add_argument("--model", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--conllu", required=True)
    p.add_argument("--lang", required=True)
    p.add_argument("--out-dir")
    p.set_defaults(handler=_cmd_probe_parse)

    p = sub.add_parser("probe-classify", help="first-token classification probe")
    p.add_argument("--model", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--train-file", required=True)
    p.add_argument("--dev-file", required=True)
    p.add_argument("--lang", required=True)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--finetune-encoder", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.set_defaults(handler=_cmd_probe_classify)

    p = sub.add_parser("experiment", help="packaged toy ablation recipes")
    p.add_argument("recipe", choices=["table5-toy", "table4-toy"])
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seeds", nargs="+", type=int, default=[1, 2, 3])
    p.add_argument("--pretrain-steps", type=int, default=5000)
    p.add_argument("--finetune-steps", type=int, default=3000)
    p.add_argument("--data-seed", type=int, default=13)
    p.add_argument("--pretrained", help="reuse an existing pretrained checkpoint")
    p.set_defaults(handler=_cmd_experiment)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.handler(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
