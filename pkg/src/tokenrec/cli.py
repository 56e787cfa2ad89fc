"""Command-line pipeline: embed, train-tokenizer, tokenize, train, evaluate,
scaling.

Config precedence is built-in profile defaults < --config JSON file <
individual flags. Every command writes a run manifest (effective config,
seeds, SHA-256 digests of inputs, outputs) next to its primary output so runs
are reproducible bit for bit.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import (InteractionDataset, SequenceMaterializer, load_interactions)
from .decoder import build_trie
from .embeddings import (EmbeddingCatalog, load_embeddings, peek_dim,
                         stub_embed, write_embeddings)
from .errors import ConfigError, DataError, DivergenceError, TokenrecError
from .evaluation import (SplitSpec, evaluate_cold_start, evaluate_zero_shot,
                         split_dataset)
from .fsq import (FsqCodebook, FsqConfig, QuantizerHyper, load_token_catalog,
                  train_quantizer, write_token_catalog)
from .model import (ModelConfig, ModelHyper, SequenceModel, train_model)
from .scaling import fit_power_law, run_scaling_experiment

DESK_PROFILE = {
    "embedding_dim": 64,
    "num_subvectors": 4,
    "levels": [8, 8, 8, 6, 5],
    "decoder_width": 64,
    "decoder_layers": 2,
    "decoder_heads": 4,
    "tokenizer_epochs": 200,
    "tokenizer_batch_size": 32,
    "tokenizer_lr": 0.03,
    "tokenizer_optimizer": "sgd",
    "width": 64,
    "n_layers": 2,
    "n_heads": 4,
    "max_tokens": 64,
    "model_epochs": 15,
    "model_batch_size": 32,
    "model_lr": 3e-3,
    "model_optimizer": "adam",
    "early_stop": False,
    "train_fraction": 0.9,
    "split_seed": 0,
    "beam_width": 50,
    "top_n": 10,
    "seed": 0,
    "embed_dim": 64,
    "embed_seed": 7,
    "scaling_fractions": [0.05, 0.10, 0.25, 0.50, 1.0],
}

PAPER_PROFILE = dict(DESK_PROFILE, **{
    "embedding_dim": 768,
    "decoder_width": 768,
    "width": 768,
    "n_layers": 3,
    "n_heads": 12,
    "max_tokens": 1024,
    "embed_dim": 768,
})

PROFILES = {"desk": DESK_PROFILE, "paper": PAPER_PROFILE}


def sha256_of(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_path, command: str, config: dict, inputs: list,
                   outputs: list, notes: dict | None = None) -> None:
    manifest = {
        "command": command,
        "tokenrec_version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "machine": {"platform": platform.platform(),
                    "python": platform.python_version()},
        "effective_config": config,
        "inputs": {str(p): sha256_of(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "notes": notes or {},
    }
    path = Path(str(out_path) + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def effective_config(args) -> dict:
    config = dict(PROFILES[args.profile])
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            overrides = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from None
        unknown = set(overrides) - set(config)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        config.update(overrides)
    for key in config:
        val = getattr(args, key, None)
        if val is not None:
            config[key] = val
    return config


def fsq_config_from(config: dict) -> FsqConfig:
    return FsqConfig(embedding_dim=config["embedding_dim"],
                     num_subvectors=config["num_subvectors"],
                     levels=tuple(config["levels"]),
                     decoder_width=config["decoder_width"],
                     decoder_layers=config["decoder_layers"],
                     decoder_heads=config["decoder_heads"])


def model_config_from(config: dict, fsq: FsqConfig) -> ModelConfig:
    return ModelConfig(vocab_size=fsq.codebook_size,
                       width=config["width"],
                       n_layers=config["n_layers"],
                       n_heads=config["n_heads"],
                       max_tokens=config["max_tokens"],
                       tokens_per_item=fsq.num_subvectors,
                       feature_dim=fsq.sub_dim)


def model_hyper_from(config: dict) -> ModelHyper:
    return ModelHyper(epochs=config["model_epochs"],
                      batch_size=config["model_batch_size"],
                      lr=config["model_lr"],
                      optimizer=config["model_optimizer"],
                      seed=config["seed"],
                      early_stop=config["early_stop"])


# --- subcommands ---------------------------------------------------------


def cmd_embed(args) -> int:
    config = effective_config(args)
    in_path = Path(args.items)
    if not in_path.exists():
        raise DataError(f"item-text file not found: {in_path}")
    entries = []
    seen = set()
    with open(in_path, encoding="utf-8") as fh:
        for row, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split(maxsplit=1)
            item_id = parts[0]
            text = parts[1].strip() if len(parts) > 1 else ""
            if item_id in seen:
                raise DataError(f"row {row}: duplicate item_id {item_id!r}")
            seen.add(item_id)
            entries.append(stub_embed(item_id, text, config["embed_dim"],
                                      config["embed_seed"]))
    catalog = EmbeddingCatalog(entries, config["embed_dim"])
    write_embeddings(catalog, args.out)
    write_manifest(args.out, "embed", config, [in_path], [args.out],
                   notes={"embedding_normalization":
                          "stub embeddings are L2-normalized; loaded "
                          "embeddings are accepted as-is"})
    print(f"embedded {len(catalog)} items -> {args.out}")
    return 0


def cmd_train_tokenizer(args) -> int:
    config = effective_config(args)
    fsq_cfg = fsq_config_from(config)
    file_dim = peek_dim(args.embeddings)
    if file_dim != fsq_cfg.embedding_dim:
        raise ConfigError(
            f"configured embedding_dim {fsq_cfg.embedding_dim} conflicts "
            f"with file dimension {file_dim} in {args.embeddings}")
    catalog = load_embeddings(args.embeddings, fsq_cfg.embedding_dim)
    hyper = QuantizerHyper(epochs=config["tokenizer_epochs"],
                           batch_size=config["tokenizer_batch_size"],
                           lr=config["tokenizer_lr"],
                           optimizer=config["tokenizer_optimizer"],
                           seed=config["seed"])
    codebook, trace = train_quantizer(catalog, fsq_cfg, hyper)
    codebook.save(args.out, meta={"embeddings_digest": sha256_of(args.embeddings)})
    trace_path = args.trace or str(args.out) + ".trace.txt"
    with open(trace_path, "w", encoding="utf-8") as fh:
        for epoch, loss in enumerate(trace):
            fh.write(f"{epoch} {loss!r}\n")
    ratio = trace[-1] / trace[0] if trace[0] else float("nan")
    write_manifest(args.out, "train-tokenizer", config, [args.embeddings],
                   [args.out, trace_path],
                   notes={"initial_loss": trace[0], "final_loss": trace[-1],
                          "loss_ratio": ratio})
    print(f"tokenizer trained: loss {trace[0]:.5f} -> {trace[-1]:.5f} "
          f"(ratio {ratio:.3f})")
    return 0


def cmd_tokenize(args) -> int:
    config = effective_config(args)
    codebook = FsqCodebook.load(args.codebook)
    catalog = load_embeddings(args.embeddings, codebook.config.embedding_dim)
    sequences = codebook.tokenize_catalog(catalog)
    write_token_catalog(sequences, args.out)
    write_manifest(args.out, "tokenize", config,
                   [args.codebook, args.embeddings], [args.out])
    distinct = len({s.tokens for s in sequences})
    print(f"tokenized {len(sequences)} items ({distinct} distinct sequences) "
          f"-> {args.out}")
    return 0


def _load_training_material(args, config):
    codebook = FsqCodebook.load(args.codebook)
    fsq_cfg = codebook.config
    embeddings = load_embeddings(args.embeddings, fsq_cfg.embedding_dim)
    token_seqs = load_token_catalog(args.tokens, fsq_cfg)
    dataset = load_interactions(args.dataset)
    dataset.validate_against(embeddings)
    materializer = SequenceMaterializer.from_token_sequences(
        token_seqs, embeddings, fsq_cfg)
    return codebook, fsq_cfg, embeddings, materializer, dataset


def cmd_train(args) -> int:
    config = effective_config(args)
    codebook, fsq_cfg, embeddings, materializer, dataset = \
        _load_training_material(args, config)
    split = SplitSpec(config["train_fraction"], config["split_seed"])
    train_data, eval_data = split_dataset(dataset, split)
    train_seqs = materializer.dataset(train_data)
    eval_seqs = materializer.dataset(eval_data)
    if args.resume:
        model = SequenceModel.load(args.resume)
        model_cfg = model.config
    else:
        model_cfg = model_config_from(config, fsq_cfg)
        model = SequenceModel(model_cfg, seed=config["seed"])
    hyper = model_hyper_from(config)
    model, trace = train_model(train_seqs, model, hyper, eval_dataset=eval_seqs)
    model.save(args.out, meta={"tokens_digest": sha256_of(args.tokens),
                               "codebook_digest": sha256_of(args.codebook)})
    trace_path = args.trace or str(args.out) + ".trace.txt"
    trace.write(trace_path)
    write_manifest(args.out, "train", config,
                   [args.tokens, args.embeddings, args.dataset, args.codebook],
                   [args.out, trace_path],
                   notes={"final_train_loss": trace.train_losses[-1],
                          "final_eval_loss": trace.eval_losses[-1],
                          "scored_tokens": trace.scored_tokens,
                          "stopped_early": trace.stopped_early,
                          "resumed_from": args.resume or ""})
    print(f"model trained: train loss {trace.train_losses[-1]:.5f}, "
          f"eval loss {trace.eval_losses[-1]:.5f} -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    config = effective_config(args)
    model = SequenceModel.load(args.model)
    codebook = FsqCodebook.load(args.codebook)
    embeddings = load_embeddings(args.embeddings,
                                 codebook.config.embedding_dim)
    dataset = load_interactions(args.dataset)
    if args.test_split:
        _, dataset = split_dataset(
            dataset, SplitSpec(config["train_fraction"], config["split_seed"]))
    if args.protocol == "zero-shot":
        report = evaluate_zero_shot(model, codebook, dataset, embeddings)
    elif args.protocol == "cold-start":
        report = evaluate_cold_start(model, codebook, dataset, embeddings,
                                     seed=config["seed"])
    else:
        raise ConfigError(f"unknown protocol {args.protocol!r}")
    payload = report.to_dict()
    payload["seed"] = config["seed"]
    payload["config"] = config
    Path(args.out).write_text(json.dumps(payload, indent=2) + "\n",
                              encoding="utf-8")
    write_manifest(args.out, "evaluate", config,
                   [args.model, args.codebook, args.embeddings, args.dataset],
                   [args.out])
    hits = " ".join(f"hit@{n}={v:.4f}" for n, v in report.hit.items())
    print(f"{report.protocol_tag}: {report.n_cases} cases {hits}")
    return 0


def cmd_scaling(args) -> int:
    config = effective_config(args)
    if args.self_test:
        rng = np.random.default_rng(config["seed"])
        a, b, c = 5.0, 0.4, 0.8
        tokens = np.logspace(3, 6, 8)
        losses = a * tokens ** (-b) + c
        fit = fit_power_law(tokens, losses)
        ok = bool(abs(fit.b - b) <= 0.1 * b)
        payload = {"self_test": True, "planted": {"a": a, "b": b, "c": c},
                   "recovered": {"a": fit.a, "b": fit.b, "c": fit.c,
                                 "r_squared": fit.r_squared},
                   "exponent_within_10pct": ok}
        Path(args.out).write_text(json.dumps(payload, indent=2) + "\n",
                                  encoding="utf-8")
        print(f"self-test: planted b={b} recovered b={fit.b:.4f} ok={ok}")
        return 0 if ok else 4
    fractions = config["scaling_fractions"]
    codebook, fsq_cfg, embeddings, materializer, dataset = \
        _load_training_material(args, config)
    split = SplitSpec(config["train_fraction"], config["split_seed"])
    train_data, eval_data = split_dataset(dataset, split)
    train_seqs = materializer.dataset(train_data)
    eval_seqs = materializer.dataset(eval_data)
    model_cfg = model_config_from(config, fsq_cfg)
    hyper = model_hyper_from(config)
    hyper.early_stop = True
    result = run_scaling_experiment(fractions, train_seqs, eval_seqs,
                                    model_cfg, hyper)
    payload = result.to_dict()
    payload["config"] = config
    Path(args.out).write_text(json.dumps(payload, indent=2) + "\n",
                              encoding="utf-8")
    records_path = Path(str(args.out) + ".records.txt")
    with open(records_path, "w", encoding="utf-8") as fh:
        for frac, tok, loss in zip(result.fractions, result.tokens,
                                   result.eval_losses):
            fh.write(f"{frac!r} {tok} {loss!r}\n")
    write_manifest(args.out, "scaling", config,
                   [args.tokens, args.embeddings, args.dataset, args.codebook],
                   [args.out, records_path])
    for frac, loss, status in zip(result.fractions, result.eval_losses,
                                  result.statuses):
        print(f"fraction {frac:.2f}: eval loss {loss:.5f} [{status}]")
    failed = [s for s in result.statuses if s != "ok"]
    return 4 if failed else 0


# --- argument parsing ------------------------------------------------------


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--profile", choices=sorted(PROFILES), default="desk",
                   help="configuration profile (default: desk)")
    p.add_argument("--config", help="JSON file overriding profile defaults")
    p.add_argument("--seed", type=int, default=None, help="run seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tokenrec",
        description="Text-token generative recommendation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("embed", help="stub-embed an item-text file")
    _add_common(p)
    p.add_argument("--items", required=True,
                   help="text file: item_id then the item text, per line")
    p.add_argument("--out", required=True, help="embedding file (.bin or text)")
    p.add_argument("--embed-dim", dest="embed_dim", type=int, default=None)
    p.add_argument("--embed-seed", dest="embed_seed", type=int, default=None)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("train-tokenizer", help="fit the FSQ quantizer")
    _add_common(p)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True, help="codebook checkpoint path")
    p.add_argument("--trace", help="loss trace path (default: <out>.trace.txt)")
    p.add_argument("--tokenizer-epochs", dest="tokenizer_epochs", type=int,
                   default=None)
    p.add_argument("--tokenizer-lr", dest="tokenizer_lr", type=float,
                   default=None)
    p.add_argument("--embedding-dim", dest="embedding_dim", type=int,
                   default=None)
    p.set_defaults(func=cmd_train_tokenizer)

    p = sub.add_parser("tokenize", help="emit the token catalog for a catalog "
                                        "of embeddings")
    _add_common(p)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("train", help="train the sequence model")
    _add_common(p)
    p.add_argument("--tokens", required=True, help="token catalog file")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--dataset", required=True, help="interaction dataset file")
    p.add_argument("--out", required=True, help="model checkpoint path")
    p.add_argument("--trace", help="loss trace path")
    p.add_argument("--resume", help="continue from an existing checkpoint")
    p.add_argument("--model-epochs", dest="model_epochs", type=int,
                   default=None)
    p.add_argument("--model-lr", dest="model_lr", type=float, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--n-layers", dest="n_layers", type=int, default=None)
    p.add_argument("--max-tokens", dest="max_tokens", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="run an evaluation protocol")
    _add_common(p)
    p.add_argument("--protocol", required=True,
                   choices=["zero-shot", "cold-start"])
    p.add_argument("--model", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="metrics report (JSON)")
    p.add_argument("--test-split", action="store_true",
                   help="evaluate only on the held-out split of the dataset")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("scaling", help="data-fraction scaling experiment")
    _add_common(p)
    p.add_argument("--tokens")
    p.add_argument("--embeddings")
    p.add_argument("--codebook")
    p.add_argument("--dataset")
    p.add_argument("--out", required=True, help="scaling result (JSON)")
    p.add_argument("--fractions", dest="scaling_fractions",
                   type=lambda s: [float(v) for v in s.split(",")],
                   default=None)
    p.add_argument("--model-epochs", dest="model_epochs", type=int,
                   default=None)
    p.add_argument("--self-test", action="store_true",
                   help="verify the power-law fitter on a planted curve")
    p.set_defaults(func=cmd_scaling)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "scaling" and not args.self_test:
        for flag in ("tokens", "embeddings", "codebook", "dataset"):
            if getattr(args, flag) is None:
                print(f"error: --{flag} is required without --self-test",
                      file=sys.stderr)
                return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 4
    except TokenrecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
