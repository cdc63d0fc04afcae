"""``egcm`` command line: one subcommand per pipeline stage.

Every subcommand writes ``<output>.manifest.json`` beside its main output
holding the resolved arguments, seed, paths, build description and wall
time, so a run can be repeated from the manifest alone.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .corpus import (
    ConfigError,
    CorpusFormatError,
    CorpusGenConfig,
    Vocab,
    corpus_paths,
    generate_corpus,
    load_audit,
    load_confusion_set,
    load_corpus,
    write_corpus,
)
from .detector import MlmConfig, MlmModel, MlmTrainConfig, StaleCacheError, detect_batch, load_detection, train_mlm
from .decoding import correct_corpus
from .evaluation import EvalItem, bench, bench_pair, sentence_metrics, zero_shot_eval, zero_shot_from_audit
from .model import EGCM, CheckpointError, InputError, ModelConfig
from .training import TrainConfig, config_dict, train

log = logging.getLogger("egcm")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2  # argparse's own code for bad flags
EXIT_MISSING = 3
EXIT_STALE = 4
EXIT_INPUT = 5
EXIT_CONFIG = 6

# Desk-scale optimiser settings for the from-scratch toy models.  The
# reference values (lr 5e-5, dropout 0.3) stay the TrainConfig defaults and
# are selected with ``--preset reference``.
PRESETS = {
    "desk": {"lr": 3e-3, "dropout": 0.1, "epochs": 20},
    "reference": {"lr": 5e-5, "dropout": 0.3, "epochs": 20},
}
MLM_DESK = {"epochs": 20, "lr": 3e-3}


class UsageError(Exception):
    pass


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"egcm-{__version__}"


def write_manifest(output: Path, command: str, args: argparse.Namespace, inputs: list, outputs: list,
                   started: float, extra: dict | None = None) -> Path:
    resolved = {k: v for k, v in vars(args).items() if k not in ("func",)}
    manifest = {
        "subcommand": command,
        "config": resolved,
        "seed": resolved.get("seed"),
        "inputs": [os.fspath(p) for p in inputs],
        "outputs": [os.fspath(p) for p in outputs],
        "build": _git_describe(),
        "wall_time_s": round(time.time() - started, 3),
    }
    if extra:
        manifest.update(extra)
    path = Path(str(output) + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{p} does not exist")
    return p


def _load_split(data_dir, split: str):
    paths = corpus_paths(data_dir)
    vocab = Vocab.load(_require(paths["vocab"]))
    pairs, rejected = load_corpus(_require(paths[split]), vocab)
    for idx, reason in rejected:
        log.warning("%s line %d skipped: %s", paths[split], idx + 1, reason)
    return vocab, pairs, Path(paths[split])


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("EGCM_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise UsageError(f"EGCM_THREADS must be an integer, got {env!r}") from exc
    return 1


def _write_tokens(path: Path, vocab: Vocab, sources, preds) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for x, z in zip(sources, preds):
            fh.write(json.dumps({"src": vocab.decode(x), "pred": vocab.decode(z)}, ensure_ascii=False) + "\n")


def _read_predictions(path: Path, vocab: Vocab) -> list[tuple[int, ...]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"{path}:{lineno}: {exc.msg}", lineno) from exc
            out.append(vocab.encode(rec["pred"]))
    return out


# -- subcommands --------------------------------------------------------------


def cmd_gen_corpus(args) -> int:
    started = time.time()
    cfg = CorpusGenConfig(vocab_size=args.vocab_size, cluster_size=args.cluster_size,
                          sentence_count=args.sentences, min_len=args.min_len, max_len=args.max_len,
                          corruption_rate=args.corruption_rate, seed=args.seed)
    paths = write_corpus(generate_corpus(cfg), args.out, cfg)
    write_manifest(Path(args.out) / "corpus", "gen-corpus", args, [], list(paths.values()), started)
    print(f"wrote corpus to {args.out}")
    return EXIT_OK


def cmd_train_mlm(args) -> int:
    started = time.time()
    vocab, pairs, path = _load_split(args.corpus, "train")
    dev_sents = None
    if Path(corpus_paths(args.corpus)["dev"]).exists():
        dev_sents = [p.tgt for p in _load_split(args.corpus, "dev")[1]]
    cfg = MlmTrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed)
    mcfg = MlmConfig(vocab_size=len(vocab), d_model=args.d_model, layers=args.layers)
    model, hist = train_mlm([p.tgt for p in pairs], len(vocab), cfg, mcfg, dev=dev_sents)
    model.save(args.out)
    write_manifest(Path(args.out), "train-mlm", args, [path], [args.out], started, {"history": hist})
    acc = hist[-1].get("dev_masked_acc")
    print(f"saved MLM to {args.out}" + (f"; dev masked accuracy {acc:.4f}" if acc is not None else ""))
    return EXIT_OK


def cmd_detect(args) -> int:
    started = time.time()
    mlm = MlmModel.load(_require(args.mlm))
    outputs, inputs = [], [Path(args.mlm)]
    for split in args.splits.split(","):
        _, pairs, path = _load_split(args.corpus, split)
        outs = detect_batch(path, pairs, mlm, k=args.k, refresh=args.refresh)
        flagged = sum(int(o.flags.sum()) for o in outs)
        total = sum(len(p) for p in pairs)
        log.info("%s: %d of %d tokens flagged", split, flagged, total)
        inputs.append(path)
        outputs.append(Path(str(path) + ".det"))
    write_manifest(outputs[-1], "detect", args, inputs, outputs, started)
    print("detection caches: " + ", ".join(os.fspath(p) for p in outputs))
    return EXIT_OK


def _train_config(args):
    preset = PRESETS[args.preset]
    return TrainConfig(
        lr=args.lr if args.lr is not None else preset["lr"],
        dropout=args.dropout if args.dropout is not None else preset["dropout"],
        epochs=args.epochs if args.epochs is not None else preset["epochs"],
        gamma=args.gamma, batch_size=args.batch_size, seed=args.seed,
        use_efenc=not args.no_efenc, use_cfl=not args.no_cfl, gold_guidance=args.gold_guidance,
        iterations=args.iterations, dev_limit=args.dev_limit,
    )


def cmd_train(args) -> int:
    started = time.time()
    vocab, pairs, path = _load_split(args.corpus, "train")
    conf, skipped = load_confusion_set(_require(corpus_paths(args.corpus)["confusion"]), vocab)
    if skipped:
        log.warning("%d confusion entries mention unknown tokens", len(skipped))
    cfg = _train_config(args)
    outcomes = None if cfg.gold_guidance else load_detection(path, pairs)
    dev = None
    if args.dev_limit != 0 and Path(corpus_paths(args.corpus)["dev"]).exists():
        _, dev_pairs, dev_path = _load_split(args.corpus, "dev")
        dev = (dev_pairs, load_detection(dev_path, dev_pairs))
    mcfg = ModelConfig(vocab_size=len(vocab), d_model=args.d_model)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log.jsonl")
    model, hist = train(pairs, outcomes, conf, len(vocab), cfg, mcfg, dev=dev, log_path=log_path)
    model.save(args.out)
    write_manifest(Path(args.out), "train", args, [path], [args.out, log_path], started,
                   {"train_config": config_dict(cfg), "model_config": asdict(model.cfg)})
    print(f"saved model to {args.out}; final l_f {hist[-1]['l_f']:.4f}")
    return EXIT_OK


def cmd_correct(args) -> int:
    started = time.time()
    vocab, pairs, path = _load_split(args.corpus, args.split)
    model = EGCM.load(_require(args.model))
    detections = load_detection(path, pairs)
    sources = [p.src for p in pairs]
    preds = correct_corpus(model, sources, detections, iterations=args.iterations, use_gfi=not args.no_gfi,
                           mode=args.mode, threads=_threads(args))
    out = Path(args.out)
    _write_tokens(out, vocab, sources, preds)
    write_manifest(out, "correct", args, [path, args.model], [out], started)
    print(f"wrote {len(preds)} corrections to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.time()
    vocab, pairs, path = _load_split(args.corpus, args.split)
    preds = _read_predictions(_require(args.pred), vocab)
    if len(preds) != len(pairs):
        raise InputError(f"{len(preds)} predictions for {len(pairs)} sentences")
    report = sentence_metrics([EvalItem(p.src, p.tgt, z) for p, z in zip(pairs, preds)]).to_dict()
    det_cache = Path(str(path) + ".det")
    if det_cache.exists():
        outcomes = load_detection(path, pairs)
        zs = zero_shot_eval(pairs, outcomes, k=args.k)
        report["zero_shot"] = asdict(zs)
        audit_path = Path(corpus_paths(args.corpus)[f"{args.split}_audit"])
        if audit_path.exists():
            report["zero_shot_audit_recount"] = zero_shot_from_audit(
                load_audit(audit_path), [len(p) for p in pairs], [o.flagged for o in outcomes])
    out = Path(args.out)
    out.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    write_manifest(out, "eval", args, [path, args.pred], [out], started)
    c = report["correction"]
    print(f"correction P {c['pre']:.4f} R {c['rec']:.4f} F1 {c['f1']:.4f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    started = time.time()
    _, pairs, path = _load_split(args.corpus, args.split)
    detections = load_detection(path, pairs)
    keep = [i for i, p in enumerate(pairs) if not args.length or len(p) == args.length][: args.limit]
    sources = [pairs[i].src for i in keep]
    dets = [detections[i] for i in keep]
    model = EGCM.load(_require(args.model))
    if args.mode == "both":
        results = [asdict(r) for r in bench_pair(model, sources, dets, args.iterations, args.warmup)]
    else:
        results = [asdict(bench(model, sources, dets, args.mode, args.iterations, args.warmup))]
    out = Path(args.out)
    out.write_text(json.dumps(results if len(results) > 1 else results[0], indent=2) + "\n", encoding="utf-8")
    write_manifest(out, "bench", args, [path, args.model], [out], started)
    for r in results:
        print(f"{r['mode']}: {r['ms_median']:.2f} ms/sentence over {r['n']} sentences")
    return EXIT_OK


# -- parser -------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"egcm: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="egcm", description="Error-guided spelling correction on synthetic data.")
    parser.add_argument("--version", action="version", version=f"egcm {__version__}")
    parser.add_argument("--config", help="JSON file of option defaults; explicit flags win")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-corpus", help="generate the seeded synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--sentences", type=int, default=10000)
    g.add_argument("--vocab-size", type=int, default=200)
    g.add_argument("--cluster-size", type=int, default=4)
    g.add_argument("--min-len", type=int, default=8)
    g.add_argument("--max-len", type=int, default=40)
    g.add_argument("--corruption-rate", type=float, default=0.1)
    g.set_defaults(func=cmd_gen_corpus)

    m = sub.add_parser("train-mlm", help="train the detector's masked language model")
    m.add_argument("--corpus", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--epochs", type=int, default=MLM_DESK["epochs"])
    m.add_argument("--lr", type=float, default=MLM_DESK["lr"])
    m.add_argument("--batch-size", type=int, default=32)
    m.add_argument("--d-model", type=int, default=64)
    m.add_argument("--layers", type=int, default=2)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_train_mlm)

    d = sub.add_parser("detect", help="zero-shot detection, cached beside each split")
    d.add_argument("--corpus", required=True)
    d.add_argument("--mlm", required=True)
    d.add_argument("--k", type=int, default=2)
    d.add_argument("--splits", default="train,dev,test")
    d.add_argument("--refresh", action="store_true", help="recompute even when the cache is current")
    d.set_defaults(func=cmd_detect)

    t = sub.add_parser("train", help="train the correction model")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--log")
    t.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    t.add_argument("--lr", type=float)
    t.add_argument("--dropout", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--gamma", type=float, default=2.0)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--d-model", type=int, default=64)
    t.add_argument("--iterations", type=int, default=10, help="decoding iterations for the dev score")
    t.add_argument("--dev-limit", type=int, default=300, help="dev sentences scored per epoch; 0 disables")
    t.add_argument("--no-efenc", action="store_true")
    t.add_argument("--no-cfl", action="store_true")
    t.add_argument("--gold-guidance", action="store_true", help="flags from the gold alignment instead of detection")
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("correct", help="decode a split")
    c.add_argument("--corpus", required=True)
    c.add_argument("--model", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--split", default="test")
    c.add_argument("--iterations", type=int, default=10)
    c.add_argument("--mode", choices=("mask-predict", "autoregressive"), default="mask-predict")
    c.add_argument("--no-gfi", action="store_true", help="start from an all-MASK draft")
    c.add_argument("--threads", type=int)
    c.set_defaults(func=cmd_correct, seed=None)

    e = sub.add_parser("eval", help="sentence-level metrics and detector coverage")
    e.add_argument("--corpus", required=True)
    e.add_argument("--pred", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--k", type=int, default=2)
    e.add_argument("--threads", type=int, help="accepted for parity with correct; scoring is single-threaded")
    e.set_defaults(func=cmd_eval, seed=None)

    b = sub.add_parser("bench", help="time mask-predict against left-to-right decoding")
    b.add_argument("--corpus", required=True)
    b.add_argument("--model", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--split", default="test")
    b.add_argument("--mode", choices=("mask-predict", "autoregressive", "both"), default="both")
    b.add_argument("--iterations", type=int, default=5)
    b.add_argument("--length", type=int, default=None, help="keep only sentences of this length")
    b.add_argument("--limit", type=int, default=200)
    b.add_argument("--warmup", type=int, default=5)
    b.set_defaults(func=cmd_bench, seed=None)
    return parser


def parse(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            overrides = json.loads(_require(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: {exc.msg}") from exc
        if not isinstance(overrides, dict):
            raise ConfigError(f"{args.config}: expected a JSON object")
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in subparser._actions}
        unknown = sorted(set(k.replace("-", "_") for k in overrides) - known)
        if unknown:
            raise ConfigError(f"{args.config}: unknown options for {args.command}: {', '.join(unknown)}")
        subparser.set_defaults(**{k.replace("-", "_"): v for k, v in overrides.items()})
        args = parser.parse_args(argv)
    return args


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"egcm: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except StaleCacheError as exc:
        print(f"egcm: stale detection cache: {exc}", file=sys.stderr)
        return EXIT_STALE
    except (InputError, CorpusFormatError, CheckpointError) as exc:
        print(f"egcm: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ConfigError, UsageError, ValueError) as exc:
        print(f"egcm: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
