"""Command-line entry point: prepare, train, eval, bench, inspect-attn, sample.

Exit codes: 0 success, 2 input error, 3 numerical failure, 4 checkpoint
mismatch, 5 vocabulary miss.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import numcore as nc
from .kgcore import SLOTS, TAIL, KGError, KnowledgeGraph, load_triples
from .model import ModelConfig, Relphormer, collate
from .trainer import FILTERED, RAW, NonFiniteLossError, TrainConfig, bench_inference, evaluate, train
from .triple2seq import RANDOM_ENTITY, make_sample

log = logging.getLogger("relphormer")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_CHECKPOINT, EXIT_VOCAB = 0, 2, 3, 4, 5

# model config field -> flat config key (the contrastive weight is spelled out)
MODEL_KEYS = {"lam": "model.lambda"}


class InputError(Exception):
    pass


class VocabError(Exception):
    pass


def default_run_config() -> dict:
    cfg = {"data.kg": "", "data.train": "", "data.valid": "", "data.test": "", "out.dir": "run"}
    for k, v in ModelConfig(vocab_size=1).to_dict().items():
        if k != "vocab_size":
            cfg[MODEL_KEYS.get(k, f"model.{k}")] = v
    for k, v in TrainConfig().to_dict().items():
        cfg[f"train.{k}"] = v
    return cfg


def resolve_key(key: str, known) -> str:
    """Full dotted key for ``key``; a unique dotted suffix is accepted (``lambda`` -> ``model.lambda``)."""
    if key in known:
        return key
    hits = [k for k in known if k.endswith("." + key)]
    if key == "lam":
        hits = hits or ["model.lambda"]
    if len(hits) != 1:
        raise InputError(f"unknown config key {key!r}" if not hits else f"ambiguous config key {key!r}: {hits}")
    return hits[0]


def coerce(value, default, key: str):
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise InputError(f"{key}: expected a boolean, got {value!r}")
        return bool(value)
    try:
        if isinstance(default, int):
            f = float(value)
            if f != int(f):
                raise InputError(f"{key}: expected an integer, got {value!r}")
            return int(f)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        raise InputError(f"{key}: expected a number, got {value!r}") from None
    return str(value)


def load_run_config(path: str | None, overrides: list[str]) -> tuple[dict, set]:
    """Defaults, then the JSON file, then ``key=value`` overrides.  Returns (config, explicitly-set keys)."""
    cfg = default_run_config()
    for k, v in cfg.items():
        log.info("default %s = %r", k, v)
    explicit = set()
    if path:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise InputError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise InputError(f"{path}: invalid JSON: {e}") from None
        if not isinstance(raw, dict):
            raise InputError(f"{path}: expected a JSON object of flat dotted keys")
        for k, v in raw.items():
            full = resolve_key(k, cfg)
            cfg[full] = coerce(v, cfg[full], full)
            explicit.add(full)
    for item in overrides:
        if "=" not in item:
            raise InputError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        full = resolve_key(k.strip(), cfg)
        cfg[full] = coerce(v.strip(), cfg[full], full)
        explicit.add(full)
    if "train.seed" not in explicit and os.environ.get("RELPHORMER_SEED"):
        cfg["train.seed"] = coerce(os.environ["RELPHORMER_SEED"], 0, "RELPHORMER_SEED")
    return cfg, explicit


def split_config(cfg: dict, vocab_size: int) -> tuple[ModelConfig, TrainConfig]:
    inverse = {v: k for k, v in MODEL_KEYS.items()}
    m = {inverse.get(k, k[len("model."):]): v for k, v in cfg.items() if k.startswith("model.")}
    t = {k[len("train."):]: v for k, v in cfg.items() if k.startswith("train.")}
    try:
        return ModelConfig(vocab_size=vocab_size, **m), TrainConfig(**t)
    except ValueError as e:
        raise InputError(str(e)) from None


# -- data ---------------------------------------------------------------------------

def read_kg(kg_path: str = "", train_path: str = "", valid_path: str = "", test_path: str = "") -> KnowledgeGraph:
    if kg_path:
        p = Path(kg_path)
        if not p.exists():
            raise InputError(f"KG file not found: {kg_path}")
        try:
            return KnowledgeGraph.from_dict(json.loads(p.read_text(encoding="utf-8")))
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise InputError(f"{kg_path}: not a prepared KG ({e})") from None
    if not train_path:
        raise InputError("no data given: set data.kg or data.train")
    for p in (train_path, valid_path, test_path):
        if p and not Path(p).exists():
            raise InputError(f"file not found: {p}")
    return load_triples(train_path, valid_path or None, test_path or None)


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def emit(obj, out: str | None = None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    print(text)


# -- checkpoints --------------------------------------------------------------------------

def sidecar_path(checkpoint: Path) -> Path:
    return checkpoint.with_suffix(".json")


def save_checkpoint(path: Path, model: Relphormer, tcfg: TrainConfig, kg: KnowledgeGraph, data: dict) -> None:
    nc.save_tensors(path, model.params)
    write_json(sidecar_path(path), {
        "model": model.config.to_dict(),
        "train": tcfg.to_dict(),
        "data": data,
        "kg_fingerprint": kg.fingerprint(),
    })


def load_checkpoint(path: str, kg_path: str = "") -> tuple[Relphormer, TrainConfig, KnowledgeGraph]:
    ck = Path(path)
    side = sidecar_path(ck)
    if not ck.exists() or not side.exists():
        raise InputError(f"checkpoint not found: {ck} (needs {side.name} alongside)")
    meta = json.loads(side.read_text(encoding="utf-8"))
    data = meta.get("data", {})
    kg = read_kg(kg_path or data.get("kg", ""), data.get("train", ""), data.get("valid", ""), data.get("test", ""))
    if kg.fingerprint() != meta.get("kg_fingerprint"):
        raise nc.CheckpointError(f"KG vocabulary fingerprint {kg.fingerprint()} does not match "
                                 f"checkpoint {meta.get('kg_fingerprint')}")
    mcfg = ModelConfig.from_dict(meta["model"])
    if mcfg.vocab_size != kg.vocab_size:
        raise nc.CheckpointError(f"checkpoint vocab {mcfg.vocab_size} != KG vocab {kg.vocab_size}")
    model = Relphormer(mcfg)
    model.load_state_dict(nc.load_tensors(ck))
    return model, TrainConfig.from_dict(meta.get("train", {})), kg


# -- subcommands ----------------------------------------------------------------------------

def cmd_prepare(args) -> int:
    for p in (args.train, args.valid, args.test):
        if p and not Path(p).exists():
            raise InputError(f"file not found: {p}")
    kg = load_triples(args.train, args.valid, args.test)
    for name, p in (("valid", args.valid), ("test", args.test)):
        if p and not kg.split(name):
            log.warning("%s split %s is empty", name, p)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "kg.json", kg.to_dict())
    stats = kg.stats()
    stats["fingerprint"] = kg.fingerprint()
    write_json(out / "stats.json", stats)
    emit(stats)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, _ = load_run_config(args.config, args.override or [])
    if args.workers:
        cfg["train.workers"] = args.workers
    kg = read_kg(cfg["data.kg"], cfg["data.train"], cfg["data.valid"], cfg["data.test"])
    mcfg, tcfg = split_config(cfg, kg.vocab_size)
    out = Path(cfg["out.dir"])
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", cfg)
    log.info("training on %r", kg)
    model = Relphormer(mcfg, seed=tcfg.seed)
    data = {k[len("data."):]: str(Path(v).resolve()) if v else "" for k, v in cfg.items() if k.startswith("data.")}
    with open(out / "log.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        def on_epoch(record):
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()
        try:
            res = train(kg, model, tcfg, on_epoch=on_epoch)
        except NonFiniteLossError as e:
            fh.write(json.dumps({"error": "non-finite loss", "epoch": e.epoch, "step": e.step,
                                 "loss_mkm": repr(e.mkm), "loss_contextual": repr(e.contextual)}) + "\n")
            raise
    ck = out / "checkpoint.rlph"
    save_checkpoint(ck, model, tcfg, kg, data)
    emit({"checkpoint": str(ck), "best_epoch": res.best_epoch,
          "best_valid_mrr": res.best_mrr if res.best_mrr >= 0 else None,
          "epochs": len(res.history), "stopped_early": res.stopped_early, "steps": res.steps})
    return EXIT_OK


def cmd_eval(args) -> int:
    model, tcfg, kg = load_checkpoint(args.checkpoint, args.kg)
    K = args.K or tcfg.K
    seed = args.seed if args.seed is not None else tcfg.seed
    settings = (RAW, FILTERED) if args.setting == "both" else (args.setting,)
    res = evaluate(model, kg, args.split, K=K, k=tcfg.k, policy=tcfg.mask_policy, seed=seed,
                   avg_logits=tcfg.avg_logits, uniform_context=tcfg.uniform_context,
                   workers=args.workers or tcfg.workers, settings=settings)
    out = {s: m.to_json() for s, m in res.items()}
    emit(out[args.setting] if args.setting != "both" else out, args.out)
    return EXIT_OK


def cmd_bench(args) -> int:
    model, tcfg, kg = load_checkpoint(args.checkpoint, args.kg)
    seed = args.seed if args.seed is not None else tcfg.seed
    rep = bench_inference(model, kg, args.queries, K=args.K, k=tcfg.k, seed=seed, split=args.split)
    emit(rep, args.out)
    return EXIT_OK


def parse_triple(kg: KnowledgeGraph, text: str):
    parts = text.split()
    if len(parts) != 3:
        raise InputError(f"--triple needs 'head relation tail', got {text!r}")
    try:
        return kg.encode(*parts)
    except (KeyError, KGError) as e:
        raise VocabError(e.args[0] if e.args else str(e)) from None


def cmd_inspect_attn(args) -> int:
    model, tcfg, kg = load_checkpoint(args.checkpoint, args.kg)
    center = parse_triple(kg, args.triple)
    if not 0 <= args.layer < model.config.layers:
        raise InputError(f"--layer must lie in [0, {model.config.layers})")
    seed = args.seed if args.seed is not None else tcfg.seed
    sample = make_sample(kg, center, args.slot, tcfg.k if args.k is None else args.k, np.random.default_rng(seed))
    captured: list = []
    model.forward(collate([sample], model.config.m), attention_out=captured)
    layer = captured[args.layer]
    phi = layer["phi"]
    emit({
        "triple": args.triple,
        "layer": args.layer,
        "mask_slot": sample.mask_slot,
        "nodes": [kg.label(int(i)) for i in sample.sequence],
        "sequence": sample.sequence.tolist(),
        "adjacency": sample.adjacency.astype(int).tolist(),
        "attention": layer["attention"][0].tolist(),
        "phi": None if phi is None else phi[0].tolist(),
    }, args.out)
    return EXIT_OK


def cmd_sample(args) -> int:
    kg = read_kg(args.kg, args.train, args.valid, args.test)
    seed = args.seed if args.seed is not None else int(os.environ.get("RELPHORMER_SEED", 0))
    rng = np.random.default_rng(seed)
    triples = kg.split(args.split)
    lines = []
    for j in range(args.n):
        t = triples[j % len(triples)]
        lines.append(json.dumps(make_sample(kg, t, args.slot, args.k, rng, args.uniform_context).to_json()))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- wiring -----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relphormer", description="Knowledge-graph transformer toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="index TSV splits and write kg.json + stats.json")
    p.add_argument("--train", required=True)
    p.add_argument("--valid")
    p.add_argument("--test")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", help="JSON file with flat dotted keys")
    p.add_argument("--override", action="append", metavar="KEY=VALUE",
                   help="override a config key (unique suffixes accepted, e.g. lambda=0)")
    p.add_argument("--workers", type=int, help="evaluation worker threads")
    p.set_defaults(func=cmd_train)

    def checkpoint_args(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--kg", default="", help="prepared kg.json (defaults to the data recorded at training)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="also write the JSON output here")

    p = sub.add_parser("eval", help="ranking metrics for a checkpoint")
    checkpoint_args(p)
    p.add_argument("--split", default="test", choices=["train", "valid", "test"])
    p.add_argument("--setting", default=FILTERED, choices=[FILTERED, RAW, "both"])
    p.add_argument("--K", type=int, help="sub-graph samples per query")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="masked inference vs score-every-candidate cost")
    checkpoint_args(p)
    p.add_argument("--queries", type=int, default=50)
    p.add_argument("--K", type=int, default=1)
    p.add_argument("--split", default="test", choices=["train", "valid", "test"])
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect-attn", help="dump attention and structure bias for one sub-graph")
    checkpoint_args(p)
    p.add_argument("--triple", required=True, help='"head relation tail" labels')
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--slot", default=TAIL, choices=list(SLOTS))
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_inspect_attn)

    p = sub.add_parser("sample", help="dump masked samples as JSON lines")
    p.add_argument("--kg", default="")
    p.add_argument("--train", default="")
    p.add_argument("--valid", default="")
    p.add_argument("--test", default="")
    p.add_argument("--split", default="train", choices=["train", "valid", "test"])
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--slot", default=RANDOM_ENTITY, choices=list(SLOTS) + [RANDOM_ENTITY])
    p.add_argument("--uniform-context", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sample)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    # no-op when the host application already configured logging
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except NonFiniteLossError as e:
        log.error("%s", e)
        return EXIT_NUMERIC
    except nc.CheckpointError as e:
        log.error("checkpoint mismatch: %s", e)
        return EXIT_CHECKPOINT
    except VocabError as e:
        log.error("vocabulary miss: %s", e)
        return EXIT_VOCAB
    except (InputError, KGError, FileNotFoundError) as e:
        log.error("%s", e)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
