"""Batch command-line entry points wiring the pipeline together.

Commands::

    ssmqa vocab       corpus.txt --size 512 --out vocab.tsv
    ssmqa preprocess  data.json --vocab vocab.tsv --out aligned.json
    ssmqa stats       data.json --out-dir stats/
    ssmqa train       data.json --vocab vocab.tsv --out-dir run/ --preset toy
    ssmqa eval        run/checkpoint-final data.json --out-dir eval/
    ssmqa infer       run/checkpoint-final --question "..." --context "..."

Exit codes: 0 success, 2 usage, 3 validation, 4 runtime. Every command
writes a run manifest (inputs with content hashes, seed, timestamp) next
to its outputs; reruns with the same inputs and seed produce identical
outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field

from . import __version__

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_RUNTIME = 4


@dataclass
class RunManifest:
    """Reproducibility sidecar written next to every command's outputs."""

    command: str
    argv: list
    inputs: dict = field(default_factory=dict)   # path -> sha256
    outputs: list = field(default_factory=list)
    seed: int = 0
    config_path: str = ""
    timestamp: str = ""

    def add_input(self, path) -> None:
        h = hashlib.sha256()
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                h.update(chunk)
        self.inputs[str(path)] = h.hexdigest()

    def write(self, directory) -> str:
        self.timestamp = time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, "run_manifest.json")
        with open(path, "w", encoding="utf-8") as f:
            json.dump(dataclasses.asdict(self), f, ensure_ascii=False,
                      indent=2, sort_keys=True)
        return path


def _load_vocab(path):
    from .tokenizer import Vocab

    return Vocab.load(path)


def _load_template(path):
    from .prompting import PromptTemplate, default_template

    return PromptTemplate.load(path) if path else default_template()


# -- commands -------------------------------------------------------------


def cmd_vocab(args) -> int:
    from .tokenizer import train_vocab

    if args.size <= 4:
        print("error: --size must leave room beyond the 4 reserved specials",
              file=sys.stderr)
        return EXIT_USAGE
    manifest = RunManifest("vocab", sys.argv[1:], seed=0)
    manifest.add_input(args.corpus)
    with open(args.corpus, encoding="utf-8") as f:
        corpus = f.read()
    vocab = train_vocab(corpus, args.size)
    vocab.save(args.out)
    manifest.outputs.append(args.out)
    manifest.write(os.path.dirname(os.path.abspath(args.out)))
    print(f"wrote vocabulary of {len(vocab)} pieces to {args.out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    from .dataset import attach_spans, load_squad_style, save_records

    manifest = RunManifest("preprocess", sys.argv[1:], seed=0)
    manifest.add_input(args.data)
    manifest.add_input(args.vocab)
    vocab = _load_vocab(args.vocab)
    records = load_squad_style(args.data)
    attach_spans(records, vocab)
    save_records(records, args.out)
    manifest.outputs.append(args.out)
    manifest.write(os.path.dirname(os.path.abspath(args.out)))
    print(f"aligned {len(records)} records -> {args.out}")
    return EXIT_OK


def cmd_stats(args) -> int:
    import csv

    from .dataset import STAT_FEATURES, compute_stats, load_squad_style

    manifest = RunManifest("stats", sys.argv[1:], seed=0)
    manifest.add_input(args.data)
    records = load_squad_style(args.data)
    stats = compute_stats(records)
    os.makedirs(args.out_dir, exist_ok=True)

    lengths_path = os.path.join(args.out_dir, "lengths.csv")
    with open(lengths_path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "lang"] + list(STAT_FEATURES))
        for i, rid in enumerate(stats.ids):
            w.writerow([rid, stats.langs[i]]
                       + [stats.features[k][i] for k in STAT_FEATURES])
    manifest.outputs.append(lengths_path)

    def corr_csv(name, corr):
        path = os.path.join(args.out_dir, f"correlation_{name}.csv")
        with open(path, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f)
            w.writerow(["feature"] + list(STAT_FEATURES))
            for fname, row in zip(STAT_FEATURES, corr):
                w.writerow([fname] + [f"{v:.12g}" for v in row])
        manifest.outputs.append(path)

    corr_csv("pooled", stats.correlation)
    for lang, corr in stats.per_language_correlation.items():
        corr_csv(lang, corr)

    summary_path = os.path.join(args.out_dir, "stats.json")
    with open(summary_path, "w", encoding="utf-8") as f:
        json.dump(stats.to_dict(), f, ensure_ascii=False, indent=2, sort_keys=True)
    manifest.outputs.append(summary_path)

    if not args.no_figures:
        from .figures import render_stats_figures

        manifest.outputs.extend(render_stats_figures(stats, args.out_dir))
    manifest.write(args.out_dir)
    print(f"wrote statistics for {stats.count} records to {args.out_dir}")
    return EXIT_OK


def _train_configs(args, vocab_size):
    from .ssm import MODEL_PRESETS, ModelConfig
    from .training import TRAIN_PRESETS, TrainConfig

    model_kw, train_kw = {}, {}
    if args.config:
        with open(args.config, encoding="utf-8") as f:
            raw = json.load(f)
        model_kw = dict(raw.get("model", {}))
        train_kw = dict(raw.get("train", {}))
    if args.preset:
        model_cfg = (ModelConfig.preset(args.preset, **model_kw)
                     if args.preset in MODEL_PRESETS
                     else ModelConfig(**model_kw))
        train_cfg = (TrainConfig.preset(args.preset, **train_kw)
                     if args.preset in TRAIN_PRESETS
                     else TrainConfig(**train_kw))
    else:
        model_cfg = ModelConfig(**model_kw)
        train_cfg = TrainConfig(**train_kw)
    model_cfg.vocab_size = vocab_size
    if args.seed is not None:
        train_cfg.seed = args.seed
    if args.epochs is not None:
        train_cfg.epochs = args.epochs
    model_cfg.max_seq_len = max(model_cfg.max_seq_len, train_cfg.max_seq_len)
    return model_cfg, train_cfg


def cmd_train(args) -> int:
    import shutil

    from .dataset import load_squad_style, attach_spans
    from .lora import attach_adapters
    from .ssm import SsmModel
    from .training import save_train_state, train

    manifest = RunManifest("train", sys.argv[1:], config_path=args.config or "")
    manifest.add_input(args.data)
    manifest.add_input(args.vocab)
    if args.config:
        manifest.add_input(args.config)
    vocab = _load_vocab(args.vocab)
    template = _load_template(args.template)
    records = load_squad_style(args.data)
    model_cfg, train_cfg = _train_configs(args, len(vocab))
    manifest.seed = train_cfg.seed
    if train_cfg.span_head and records and records[0].token_start is None:
        attach_spans(records, vocab)

    val_records = None
    if args.val_data:
        manifest.add_input(args.val_data)
        val_records = load_squad_style(args.val_data)
        if train_cfg.span_head and val_records[0].token_start is None:
            attach_spans(val_records, vocab)

    model = SsmModel(model_cfg, seed=train_cfg.seed)
    adapters = attach_adapters(model, train_cfg.lora_config(), seed=train_cfg.seed)
    result = train(model, adapters, records, train_cfg, vocab,
                   template=template, val_records=val_records,
                   out_dir=args.out_dir)
    # make every checkpoint self contained
    for ckpt in result.checkpoints + [p for p in (result.final_path,
                                                  result.best_path) if p]:
        shutil.copy(args.vocab, os.path.join(ckpt, "vocab.tsv"))
    manifest.outputs.extend(result.checkpoints)
    if result.final_path:
        manifest.outputs.append(result.final_path)
    manifest.write(args.out_dir)
    last = result.log[-1]["loss"] if result.log else float("nan")
    print(f"trained {train_cfg.epochs} epochs ({len(result.log)} steps), "
          f"final loss {last:.4f}; checkpoints in {args.out_dir}")
    return EXIT_OK


def _model_and_vocab(checkpoint, vocab_path=None):
    from .checkpoint import checkpoint_load
    from .training import model_from_checkpoint

    state = checkpoint_load(checkpoint)
    model = model_from_checkpoint(state)
    vp = vocab_path or os.path.join(checkpoint, "vocab.tsv")
    vocab = _load_vocab(vp)
    return model, vocab, state


def cmd_eval(args) -> int:
    from .training import evaluate

    manifest = RunManifest("eval", sys.argv[1:])
    manifest.add_input(args.data)
    model, vocab, state = _model_and_vocab(args.checkpoint, args.vocab)
    template = _load_template(args.template)
    from .dataset import attach_spans, load_squad_style

    records = load_squad_style(args.data)
    span_mode = state.extra.get("has_span_head", False) and not args.generate
    if span_mode and records[0].token_start is None:
        attach_spans(records, vocab)
    if args.limit:
        records = records[: args.limit]
    report, mean_loss = evaluate(model, records, vocab, template=template,
                                 span_mode=span_mode,
                                 max_answer_tokens=args.max_answer_tokens)
    os.makedirs(args.out_dir, exist_ok=True)
    report.save_json(os.path.join(args.out_dir, "report.json"))
    report.save_csv(os.path.join(args.out_dir, "per_sample.csv"))
    report.save_corpus_csv(os.path.join(args.out_dir, "corpus.csv"))
    manifest.outputs += [os.path.join(args.out_dir, p)
                         for p in ("report.json", "per_sample.csv", "corpus.csv")]
    if not args.no_figures:
        from .figures import render_report_figure

        fig = render_report_figure(report,
                                   os.path.join(args.out_dir, "metrics.png"))
        manifest.outputs.append(fig)
    manifest.write(args.out_dir)
    print(json.dumps({"mean_loss": mean_loss, "corpus": report.corpus},
                     ensure_ascii=False, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_infer(args) -> int:
    from .dataset import QaRecord, load_squad_style
    from .prompting import SelectionConfig, generate, render_prompt, select_best
    from .tokenizer import SOS_ID, encode

    model, vocab, state = _model_and_vocab(args.checkpoint, args.vocab)
    template = _load_template(args.template)
    record = QaRecord(id="query", lang=args.lang, context=args.context,
                      question=args.question, answer="", answer_start=0)
    examples = []
    if args.shots:
        if not args.examples:
            print("error: --shots requires --examples", file=sys.stderr)
            return EXIT_USAGE
        examples = load_squad_style(args.examples)[: args.shots]
        template.check_collisions(
            [e.context for e in examples] + [e.question for e in examples]
        )
    prompt = render_prompt(template, record, examples)
    prompt_ids = [SOS_ID] + encode(prompt, vocab)
    sel = SelectionConfig(p_samples=args.samples, temperature=args.temperature,
                          max_tokens=args.max_answer_tokens, lam=args.lam,
                          seed=args.seed or 0)
    candidates = generate(model, prompt_ids, sel, vocab)
    answer, score = select_best(candidates, model, prompt_ids, sel, vocab)
    if args.verbose:
        for i, c in enumerate(candidates):
            print(f"candidate[{i}]: {c}", file=sys.stderr)
        print(f"score: {score:.4f}", file=sys.stderr)
    print(answer)
    return EXIT_OK


# -- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ssmqa",
        description="Selective state-space question answering for "
                    "Devanagari-script languages.",
    )
    p.add_argument("--version", action="version", version=f"ssmqa {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("vocab", help="train a vocabulary from a text corpus")
    sp.add_argument("corpus")
    sp.add_argument("--size", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_vocab)

    sp = sub.add_parser("preprocess", help="validate records and align answer spans")
    sp.add_argument("data")
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_preprocess)

    sp = sub.add_parser("stats", help="dataset statistics: CSV, JSON and figures")
    sp.add_argument("data")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--no-figures", action="store_true")
    sp.set_defaults(fn=cmd_stats)

    sp = sub.add_parser("train", help="LoRA fine-tune a model on QA records")
    sp.add_argument("data")
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--config", help="JSON file with model/train settings")
    sp.add_argument("--preset", help="model family preset (mamba, mamba2, "
                                     "falcon, jamba, zamba, samba, hymba, toy)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--val-data")
    sp.add_argument("--template")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="score a checkpoint on a dataset")
    sp.add_argument("checkpoint")
    sp.add_argument("data")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--vocab")
    sp.add_argument("--template")
    sp.add_argument("--limit", type=int)
    sp.add_argument("--max-answer-tokens", type=int, default=16)
    sp.add_argument("--generate", action="store_true",
                    help="force generation even for span-head checkpoints")
    sp.add_argument("--no-figures", action="store_true")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("infer", help="answer one question from the command line")
    sp.add_argument("checkpoint")
    sp.add_argument("--question", required=True)
    sp.add_argument("--context", required=True)
    sp.add_argument("--lang", default="hi")
    sp.add_argument("--shots", type=int, default=0)
    sp.add_argument("--examples", help="dataset file supplying few-shot examples")
    sp.add_argument("--samples", type=int, default=1, help="P candidates")
    sp.add_argument("--temperature", type=float, default=0.0)
    sp.add_argument("--lam", type=float, default=0.5)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--max-answer-tokens", type=int, default=16)
    sp.add_argument("--vocab")
    sp.add_argument("--template")
    sp.add_argument("--verbose", action="store_true")
    sp.set_defaults(fn=cmd_infer)
    return p


def main(argv=None) -> int:
    from .checkpoint import CheckpointError
    from .dataset import DatasetError
    from .training import TrainingDiverged

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (DatasetError, ValueError) as e:
        print(f"validation error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (CheckpointError, TrainingDiverged, OSError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
