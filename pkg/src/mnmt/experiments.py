"""Toy-scale ablation recipes over the cipher corpus.

The init-strategy study fine-tunes the same tiny translation model under
random, encoder-only, and encoder-and-decoder initialization from one shared
MLM-pretrained encoder, across several seeds, and scores per-direction dev
BLEU on averaged checkpoints. The architecture study adds a conventional
baseline architecture (no embedding layer norm, scaled embeddings, different
depth/width) under random init so the weights-vs-architecture question is
answered by the same harness. Alignment probes on the strongest models are
recorded alongside.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

from .checkpoint import load_checkpoint, model_from_checkpoint, save_checkpoint
from .corpus import SamplingSchedule, Vocabulary, load_monolingual, load_parallel
from .evaluate import BeamParams, bleu, translate_corpus
from .initialize import InitStrategy, initialize
from .model import ModelConfig
from .probe import alignment_error_rate
from .toydata import load_manifest, make_toy_data
from .train import TrainConfig, average_checkpoints, pretrain_mlm, train

TOY_LANGUAGES = ("aa", "bb", "cc")
TOY_SIZES = (20000, 5000, 1000)

STRATEGIES = {
    "random": InitStrategy("random"),
    "enc": InitStrategy("encoder"),
    "enc_dec": InitStrategy("encoder_decoder", "share"),
}


@dataclass
class ToySettings:
    seeds: tuple = (1, 2, 3)
    pretrain_steps: int = 5000
    finetune_steps: int = 3000
    data_seed: int = 13
    pretrain_seed: int = 7
    batch_size: int = 32
    peak_lr: float = 3e-4
    pretrain_lr: float = 5e-4
    warmup_steps: int = 400
    label_smoothing: float = 0.1
    schedule: SamplingSchedule = field(default_factory=SamplingSchedule)
    beam: BeamParams = field(default_factory=lambda: BeamParams(5, 1.0, 16))
    dev_limit: int = 200


def translation_config(vocab_size: int) -> ModelConfig:
    return ModelConfig(encoder_layers=4, decoder_layers=2, hidden=64, heads=4,
                       ffn_dim=128, vocab_size=vocab_size, max_positions=32)


def encoder_config(vocab_size: int) -> ModelConfig:
    return ModelConfig(encoder_layers=4, decoder_layers=0, hidden=64, heads=4,
                       ffn_dim=128, vocab_size=vocab_size, max_positions=32)


def baseline_config(vocab_size: int) -> ModelConfig:
    """Conventional NMT architecture for the weights-vs-architecture row:
    symmetric depth, scaled embeddings, no embedding layer norm."""
    return ModelConfig(encoder_layers=3, decoder_layers=3, hidden=64, heads=4,
                       ffn_dim=128, vocab_size=vocab_size, max_positions=32,
                       embed_layernorm=False, scale_embeddings=True)


def ensure_toy_data(data_dir, settings: ToySettings) -> dict:
    if not os.path.exists(os.path.join(data_dir, "toy_manifest.json")):
        make_toy_data(data_dir, TOY_LANGUAGES, TOY_SIZES, seed=settings.data_seed)
    return load_manifest(data_dir)


def _dump_config(directory, payload: dict) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=repr)
        fh.write("\n")


def pretrain_encoder(data_dir, out_dir, settings: ToySettings) -> str:
    """MLM-pretrain the shared toy encoder once; reuse it if already built."""
    path = os.path.join(out_dir, "pretrained.ckpt")
    if os.path.exists(path):
        return path
    os.makedirs(out_dir, exist_ok=True)
    manifest = load_manifest(data_dir)
    vocab = Vocabulary.load(os.path.join(data_dir, "vocab.txt"))
    mono = {lang: load_monolingual(data_dir, lang) for lang in manifest["languages"]}
    model = initialize(encoder_config(len(vocab)), InitStrategy("random"), None,
                       seed=settings.pretrain_seed)
    cfg = TrainConfig(max_steps=settings.pretrain_steps,
                      batch_size=settings.batch_size,
                      label_smoothing=0.0, peak_lr=settings.pretrain_lr,
                      warmup_steps=settings.warmup_steps,
                      checkpoint_interval=settings.pretrain_steps,
                      seed=settings.pretrain_seed)
    _dump_config(out_dir, {"model": model.config.to_dict(), "train": asdict(cfg)})
    pretrain_mlm(model, mono, vocab, cfg, out_dir=out_dir)
    save_checkpoint(model, path)
    return path


def dev_bleu(model, data_dir, directions, vocab, beam: BeamParams,
             limit: int | None = None) -> dict:
    scores = {}
    for src, tgt in directions:
        pairs = load_parallel(data_dir, [(src, tgt)], split="dev").pairs[0]
        if limit:
            pairs = pairs[:limit]
        hyps = translate_corpus(model, [s for s, _ in pairs], tgt, vocab, beam)
        scores[f"{src}-{tgt}"] = bleu([h.split() for h in hyps],
                                      [t.split() for _, t in pairs])
    return scores


def finetune_and_score(data_dir, run_dir, config: ModelConfig, strategy_name: str,
                       seed: int, settings: ToySettings, pretrained: str | None) -> dict:
    manifest = load_manifest(data_dir)
    directions = [tuple(d) for d in manifest["directions"]]
    vocab = Vocabulary.load(os.path.join(data_dir, "vocab.txt"))
    corpus = load_parallel(data_dir, directions,
                           max_tokens=config.max_positions - 2)
    strategy = STRATEGIES[strategy_name]
    source = load_checkpoint(pretrained) if strategy.variant != "random" else None
    model = initialize(config, strategy, source, seed=seed)
    cfg = TrainConfig(max_steps=settings.finetune_steps,
                      batch_size=settings.batch_size,
                      label_smoothing=settings.label_smoothing,
                      peak_lr=settings.peak_lr,
                      warmup_steps=settings.warmup_steps,
                      checkpoint_interval=max(1, settings.finetune_steps // 6),
                      seed=seed, schedule=settings.schedule)
    _dump_config(run_dir, {"model": config.to_dict(), "train": asdict(cfg),
                           "strategy": strategy_name, "seed": seed,
                           "pretrained": pretrained})
    result = train(model, corpus, vocab, cfg, out_dir=run_dir)
    averaged = average_checkpoints(result.checkpoint_paths[-5:])
    avg_path = os.path.join(run_dir, "averaged.ckpt")
    save_checkpoint(averaged, avg_path)
    eval_model = model_from_checkpoint(averaged)
    scores = dev_bleu(eval_model, data_dir, directions, vocab, settings.beam,
                      settings.dev_limit)
    return {
        "strategy": strategy_name,
        "seed": seed,
        "bleu": scores,
        "avg_bleu": sum(scores.values()) / len(scores),
        "final_loss": result.metrics[-1]["loss"],
        "averaged_checkpoint": avg_path,
    }


def _align_probe(ckpt_path, data_dir, pair, settings: ToySettings) -> dict:
    model = model_from_checkpoint(load_checkpoint(ckpt_path))
    vocab = Vocabulary.load(os.path.join(data_dir, "vocab.txt"))
    src, tgt = pair
    pairs = load_parallel(data_dir, [pair], split="dev").pairs[0][:settings.dev_limit]
    with open(os.path.join(data_dir, f"align.{src}-{tgt}.txt"), encoding="utf-8") as fh:
        gold = [line.rstrip("\n") for line in fh][:settings.dev_limit]
    return alignment_error_rate(model, pairs, gold, src, tgt, vocab)


def _write_report(out_dir, name, payload: dict, table: str) -> None:
    os.makedirs(os.path.join(out_dir, "reports"), exist_ok=True)
    with open(os.path.join(out_dir, "reports", f"{name}.json"), "w",
              encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "reports", f"{name}.txt"), "w",
              encoding="utf-8") as fh:
        fh.write(table)


def _format_rows(rows, directions) -> str:
    headers = ["strategy", "seed"] + [f"{s}-{t}" for s, t in directions] + ["avg"]
    lines = ["  ".join(f"{h:>10}" for h in headers)]
    for row in rows:
        cells = [row.get("arch", row["strategy"]), str(row["seed"])]
        cells += [f"{row['bleu'][f'{s}-{t}']:.2f}" for s, t in directions]
        cells.append(f"{row['avg_bleu']:.2f}")
        lines.append("  ".join(f"{c:>10}" for c in cells))
    return "\n".join(lines) + "\n"


def run_table5(out_dir, settings: ToySettings) -> dict:
    """Init-strategy ablation: random vs enc vs enc+dec across seeds."""
    data_dir = os.path.join(out_dir, "data")
    manifest = ensure_toy_data(data_dir, settings)
    _dump_config(out_dir, {"recipe": "table5-toy", "settings": asdict(settings)})
    directions = [tuple(d) for d in manifest["directions"]]
    sizes = manifest["sizes"]
    lowest = f"{directions[sizes.index(min(sizes))][0]}-{directions[sizes.index(min(sizes))][1]}"
    pretrained = pretrain_encoder(data_dir, os.path.join(out_dir, "pretrain"), settings)

    rows = []
    probes = []
    for seed in settings.seeds:
        for strategy in ("random", "enc", "enc_dec"):
            run_dir = os.path.join(out_dir, "runs", f"{strategy}-seed{seed}")
            row = finetune_and_score(data_dir, run_dir,
                                     translation_config(_vocab_size(data_dir)),
                                     strategy, seed, settings, pretrained)
            rows.append(row)
        enc_dec_ckpt = rows[-1]["averaged_checkpoint"]
        probe = {"seed": seed}
        probe_pairs = {directions[sizes.index(max(sizes))],
                       directions[sizes.index(min(sizes))]}
        for pair in sorted(probe_pairs):
            report = _align_probe(enc_dec_ckpt, data_dir, tuple(pair), settings)
            probe[f"aer_{pair[0]}-{pair[1]}"] = report["aer"]
        probes.append(probe)

    results = {
        "directions": [f"{s}-{t}" for s, t in directions],
        "sizes": sizes,
        "lowest_resource_direction": lowest,
        "seeds": list(settings.seeds),
        "pretrain_steps": settings.pretrain_steps,
        "finetune_steps": settings.finetune_steps,
        "pretrained_checkpoint": pretrained,
        "rows": rows,
        "alignment_probes": probes,
    }
    _write_report(out_dir, "table5", results, _format_rows(rows, directions))
    return results


def run_table4(out_dir, settings: ToySettings, pretrained: str | None = None) -> dict:
    """Architecture-vs-weights ablation on one seed.

    Reuses the matching init-study rows when they exist in the same out_dir so
    only the baseline architecture has to be trained fresh.
    """
    data_dir = os.path.join(out_dir, "data")
    manifest = ensure_toy_data(data_dir, settings)
    directions = [tuple(d) for d in manifest["directions"]]
    seed = settings.seeds[0]
    if pretrained is None:
        pretrained = pretrain_encoder(data_dir, os.path.join(out_dir, "pretrain"),
                                      settings)

    cached = {}
    table5_path = os.path.join(out_dir, "reports", "table5.json")
    if os.path.exists(table5_path):
        with open(table5_path, encoding="utf-8") as fh:
            for row in json.load(fh)["rows"]:
                if row["seed"] == seed:
                    cached[row["strategy"]] = row

    def compat_row(strategy):
        if strategy in cached:
            return dict(cached[strategy])
        run_dir = os.path.join(out_dir, "runs", f"{strategy}-seed{seed}")
        return finetune_and_score(data_dir, run_dir,
                                  translation_config(_vocab_size(data_dir)),
                                  strategy, seed, settings, pretrained)

    baseline = finetune_and_score(
        data_dir, os.path.join(out_dir, "runs", f"baseline-arch-seed{seed}"),
        baseline_config(_vocab_size(data_dir)), "random", seed, settings, pretrained)
    baseline["arch"] = "baseline-3x3-64"
    rows = [baseline]
    for strategy, arch in (("random", "compat-4x2-64"), ("enc_dec", "compat-4x2-64")):
        row = compat_row(strategy)
        row["arch"] = arch
        rows.append(row)

    results = {
        "seed": seed,
        "directions": [f"{s}-{t}" for s, t in directions],
        "rows": rows,
        "note": ("baseline architecture vs pretrain-compatible architecture, "
                 "random weights, plus the pretrained-init model"),
    }
    _write_report(out_dir, "table4", results, _format_rows(rows, directions))
    return results


def _vocab_size(data_dir) -> int:
    return len(Vocabulary.load(os.path.join(data_dir, "vocab.txt")))
