"""Command-line front-end tying the pipeline together.

Verbs: pretokenize, train, compose, analyze, generate, count-params,
inspect-checkpoint. Configs are YAML files with ``model:`` and ``train:``
sections (unknown keys rejected); the packaged presets under ``configs/``
can be named directly. PAPA_SEED overrides the configured seed. Exit codes:
0 success, 2 config error, 3 data error, 4 numerical abort, 5 composition
conflict.
"""

from __future__ import annotations

import argparse
import importlib.resources
import json
import os
import sys

import numpy as np
import yaml

from papaformer.analysis import (
    AnalysisError,
    format_generation,
    format_utilization,
    generate,
    trace_dominance,
    trace_records,
    trace_routing,
    utilization,
)
from papaformer.blocks import ConfigError
from papaformer.checkpoint import CheckpointError, load_checkpoint, read_manifest, save_checkpoint
from papaformer.composer import CompositionError, CompositionPlan, compose, composition_provenance, validate_plan
from papaformer.data import (
    ChunkStore,
    DataError,
    build_chunk_store,
    load_corpus_file,
    synthetic_math_corpus,
    synthetic_story_corpus,
)
from papaformer.model import ModelConfig, build, count_params
from papaformer.tensor import NonFiniteError, RngState
from papaformer.trainer import TrainConfig, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
EXIT_COMPOSITION = 5

_CONFIG_SECTIONS = ("model", "train")

ROLES = {
    "baseline": {},
    "path1": {"corpus": "story", "sub": 60},
    "path2": {"corpus": "math", "sub": 60},
    "composite": {"sub": 40},
}


def _preset_path(name: str):
    res = importlib.resources.files("papaformer") / "configs" / f"{name}.yaml"
    return res if res.is_file() else None


def load_config(ref: str) -> dict:
    """Parse a YAML config file or packaged preset name; strict on keys."""
    if os.path.exists(ref):
        text = open(ref, "r", encoding="utf-8").read()
    else:
        preset = _preset_path(ref)
        if preset is None:
            raise ConfigError(f"config {ref!r}: no such file or preset")
        text = preset.read_text(encoding="utf-8")
    raw = yaml.safe_load(text)
    if not isinstance(raw, dict):
        raise ConfigError(f"config {ref!r}: expected a mapping at the top level")
    unknown = set(raw) - set(_CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(f"config {ref!r}: unknown sections {sorted(unknown)}")
    return raw


def model_config_from(raw: dict, vocab_size: int | None = None) -> ModelConfig:
    section = dict(raw.get("model") or {})
    if section.get("vocab_size") in (None, "auto"):
        if vocab_size is None:
            raise ConfigError("vocab_size: set explicitly or provide a chunk store to infer from")
        section["vocab_size"] = vocab_size
    return ModelConfig.from_dict(section)


def train_config_from(raw: dict, seed_override: int | None = None) -> TrainConfig:
    cfg = TrainConfig.from_dict(dict(raw.get("train") or {}))
    env_seed = os.environ.get("PAPA_SEED")
    if env_seed is not None:
        cfg.seed = int(env_seed)
    if seed_override is not None:
        cfg.seed = seed_override
    return cfg


def _load_corpora(args) -> list:
    corpora = []
    for spec in args.corpus or []:
        tag, _, path = spec.partition("=")
        if not path:
            raise ConfigError(f"--corpus {spec!r}: expected TAG=PATH")
        corpora.append(load_corpus_file(path, tag))
    if args.synthetic:
        corpora.append(synthetic_story_corpus(args.synthetic, seed=args.seed))
        corpora.append(synthetic_math_corpus(args.synthetic, seed=args.seed + 1))
    if not corpora:
        raise DataError("no corpora given; use --corpus TAG=PATH or --synthetic N")
    return corpora


def cmd_pretokenize(args) -> int:
    corpora = _load_corpora(args)
    store = build_chunk_store(corpora, seq_len=args.seq_len, seed=args.seed, byte_fallback=args.byte_fallback)
    store.save(args.out)
    print(f"wrote {args.out}: vocab={store.tokenizer.vocab_size} seq_len={store.seq_len}")
    for tag in sorted({c.corpus for c in store.chunks}):
        for sub in (60, 40):
            for epoch in (1, 2):
                n = len(store.select(corpus=tag, sub=sub, epoch=epoch))
                print(f"  {tag} sub{sub} epoch{epoch}: {n} chunks ({n * store.seq_len} tokens)")
    return EXIT_OK


def cmd_train(args) -> int:
    raw = load_config(args.config)
    store = ChunkStore.load(args.data)
    cfg = train_config_from(raw, args.seed)
    model_cfg = model_config_from(raw, vocab_size=store.tokenizer.vocab_size)
    chunks = store.select(**ROLES[args.role])
    if not chunks:
        raise DataError(f"role {args.role!r}: chunk store has no matching chunks")
    if args.init:
        model = load_checkpoint(args.init).model
        if model.config != model_cfg:
            raise ConfigError(f"--init checkpoint config does not match {args.config!r}")
    else:
        model = build(model_cfg, RngState(cfg.seed))
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    log_path = args.log or args.out + ".log"
    with open(log_path, "w", encoding="utf-8") as log:
        report = train(model, chunks, cfg, checkpoint_path=args.out, log_file=log)
    print(f"trained {len(report.steps)} steps; final total loss {report.losses[-1]:.4f}")
    print(f"checkpoint: {args.out}")
    print(f"log: {log_path}")
    return EXIT_OK


def cmd_compose(args) -> int:
    raw = load_config(args.config)
    vocab = read_manifest(args.paths[0])["model_config"]["vocab_size"]
    target = model_config_from(raw, vocab_size=vocab)
    plan = CompositionPlan(path_checkpoints=list(args.paths), target_config=target)
    report = validate_plan(plan)
    if not report.ok:
        raise CompositionError("; ".join(report.conflicts))
    seed = int(os.environ.get("PAPA_SEED", args.seed))
    model = compose(plan, RngState(seed))
    provenance = composition_provenance(target)
    save_checkpoint(args.out, model, provenance=provenance)
    with open(args.out + ".provenance.json", "w", encoding="utf-8") as f:
        json.dump(provenance, f, indent=2, sort_keys=True)
    for name, tag, src in report.entries:
        print(f"{tag:<13} {name} <- {src}")
    print(f"composite checkpoint: {args.out}")
    return EXIT_OK


def _read_prompts(path: str) -> list:
    prompts = []
    for i, line in enumerate(open(path, "r", encoding="utf-8"), start=1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        domain, sep, text = line.partition("\t")
        if not sep:
            raise DataError(f"{path}:{i}: expected 'domain<TAB>prompt'")
        prompts.append((domain.strip(), text.strip()))
    if not prompts:
        raise DataError(f"{path}: no prompts")
    return prompts


def cmd_analyze(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    store = ChunkStore.load(args.data)
    prompts = _read_prompts(args.prompts)
    kind = ckpt.model.config.connection_kind
    if kind == "none":
        raise AnalysisError("baseline models have no parallel layers to analyze")
    tracer = trace_dominance if kind == "share_linear" else trace_routing
    traces, domains = [], []
    for domain, text in prompts:
        traces.append(tracer(ckpt.model, store.tokenizer.tokenize(text)))
        domains.append(domain)
    for rec in trace_records(traces, domains):
        print(f"prompt={rec['prompt']} domain={rec['domain']} layer={rec['layer']} selection={rec['selection']}")
    print(format_utilization(utilization(traces, domains)))
    return EXIT_OK


def cmd_generate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    store = ChunkStore.load(args.data)
    seed = int(os.environ.get("PAPA_SEED", args.seed))
    result = generate(
        ckpt.model,
        store.tokenizer.tokenize(args.prompt),
        args.max_new_tokens,
        mode=args.mode,
        temperature=args.temperature,
        top_n=args.top_n,
        rng=RngState(seed),
    )
    print(f"prompt: {args.prompt}")
    print(f"continuation: {result.text(store.tokenizer)}")
    print("next token predictions:")
    print(format_generation(result, store.tokenizer))
    return EXIT_OK


def cmd_count_params(args) -> int:
    raw = load_config(args.config)
    cfg = model_config_from(raw)
    total, breakdown = count_params(build(cfg, RngState(0)))
    for name in sorted(breakdown):
        print(f"{breakdown[name]:>12,}  {name}")
    print(f"{total:>12,}  total")
    return EXIT_OK


def cmd_inspect_checkpoint(args) -> int:
    manifest = read_manifest(args.checkpoint)
    cfg = manifest["model_config"]
    print(f"format version {manifest['format_version']}")
    print(f"model: d_model={cfg['d_model']} connection={cfg['connection_kind']} vocab={cfg['vocab_size']}")
    if manifest.get("rng"):
        print(f"rng: seed={manifest['rng']['seed']} position={manifest['rng']['position']}")
    total = 0
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        total += n
        print(f"{n:>12,}  {e['name']} {tuple(e['shape'])} [{e['provenance']}]")
    print(f"{total:>12,}  total scalars")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="papaformer", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretokenize", help="tokenize corpora into a chunk store")
    s.add_argument("--corpus", action="append", metavar="TAG=PATH")
    s.add_argument("--synthetic", type=int, default=0, metavar="N", help="add N synthetic docs per domain")
    s.add_argument("--seq-len", type=int, default=256)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--byte-fallback", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretokenize)

    s = sub.add_parser("train", help="train a model on a chunk store")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--role", choices=sorted(ROLES), default="baseline")
    s.add_argument("--init", default=None, metavar="CKPT", help="start from this checkpoint instead of a fresh build")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--log", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("compose", help="merge path checkpoints into a parallel model")
    s.add_argument("paths", nargs="+", metavar="PATH_CKPT")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_compose)

    s = sub.add_parser("analyze", help="routing/dominance utilization report")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--prompts", required=True, help="file of 'domain<TAB>prompt' lines")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("generate", help="continue a prompt")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--prompt", required=True)
    s.add_argument("--max-new-tokens", type=int, default=20)
    s.add_argument("--mode", choices=("greedy", "sample"), default="greedy")
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--top-n", type=int, default=5)
    s.add_argument("--seed", type=int, default=42)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("count-params", help="itemized parameter count for a config")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_count_params)

    s = sub.add_parser("inspect-checkpoint", help="print a checkpoint manifest")
    s.add_argument("checkpoint")
    s.set_defaults(func=cmd_inspect_checkpoint)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, yaml.YAMLError) as e:
        print(f"error: config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, AnalysisError, OSError) as e:
        print(f"error: data: {e}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteError as e:
        print(f"error: numerical: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except CompositionError as e:
        print(f"error: composition: {e}", file=sys.stderr)
        return EXIT_COMPOSITION


if __name__ == "__main__":
    sys.exit(main())
