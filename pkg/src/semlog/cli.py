"""Command-line front end.

Subcommands wire the library into reproducible workflows: every
artifact-writing command emits a sidecar manifest with the resolved
configuration, seed, package version, and input digests.  Option
precedence is command line > --config file > SEMLOG_SEED > built-in
default.  Report paths render figures next to their JSON output.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, downstream, features, jparser, knowledge
from . import logio, miner, neuralcore, report, synth

PROG = "semlog"
DEFAULT_SEED = 42
SEED_ENV = "SEMLOG_SEED"


class CliError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Option resolution and manifests
# ---------------------------------------------------------------------------

def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    if sys.version_info >= (3, 11):
        import tomllib
    else:
        import tomli as tomllib
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise CliError("invalid config file: %s" % exc) from None
    flat = {}
    for key, value in data.items():
        flat[key.replace("-", "_")] = value
    return flat


def _resolve(args: argparse.Namespace, config: dict, key: str, default):
    value = getattr(args, key, None)
    if value is not None:
        return value
    if key in config:
        return config[key]
    return default


def _resolve_seed(args: argparse.Namespace, config: dict) -> int:
    value = _resolve(args, config, "seed", None)
    if value is None:
        value = os.environ.get(SEED_ENV)
    return DEFAULT_SEED if value is None else int(value)


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(path: Path, command: str, resolved: dict,
                    inputs: dict[str, str]) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": resolved,
        "inputs": {name: _sha256(p) for name, p in inputs.items()},
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _json_out(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------

def _cmd_train_embeddings(args, config) -> int:
    seed = _resolve_seed(args, config)
    dim = int(_resolve(args, config, "dim", 100))
    epochs = int(_resolve(args, config, "epochs", 10))
    window = int(_resolve(args, config, "window", 5))
    negatives = int(_resolve(args, config, "negatives", 5))
    min_count = int(_resolve(args, config, "min_count", 1))
    drop = int(_resolve(args, config, "drop_columns", 0))
    messages = logio.read_raw_messages(args.corpus, drop)
    table = features.train_skipgram(
        [list(m.tokens) for m in messages], d=dim, epochs=epochs,
        window=window, negatives=negatives, min_count=min_count, seed=seed,
    )
    out = Path(args.out)
    features.save_embeddings(str(out), table)
    resolved = {"dim": dim, "epochs": epochs, "window": window,
                "negatives": negatives, "min_count": min_count,
                "drop_columns": drop, "seed": seed,
                "vocab": len(table.vocab)}
    _write_manifest(out.with_suffix(out.suffix + ".manifest.json"),
                    "train-embeddings", resolved, {"corpus": args.corpus})
    print("trained %d-dim embeddings for %d tokens -> %s"
          % (dim, len(table.vocab), out), file=sys.stderr)
    return 0


def _miner_config(args, config) -> miner.MinerConfig:
    return miner.MinerConfig(
        d_word=int(_resolve(args, config, "dim", 100)),
        hidden=int(_resolve(args, config, "hidden", 128)),
        layers=int(_resolve(args, config, "layers", 2)),
        use_char=bool(_resolve(args, config, "use_char", True)),
        use_local=bool(_resolve(args, config, "use_local", True)),
        use_lstm=bool(_resolve(args, config, "use_lstm", True)),
        use_interval=bool(_resolve(args, config, "use_interval", True)),
    )


def _cmd_train_miner(args, config) -> int:
    seed = _resolve_seed(args, config)
    cfg = neuralcore.TrainConfig(
        lr0=float(_resolve(args, config, "lr", 0.01)),
        decay=float(_resolve(args, config, "decay", 0.005)),
        epochs=int(_resolve(args, config, "epochs", 30)),
        seed=seed,
    )
    corpus = logio.read_annotations(args.annotations)
    table = features.load_embeddings(args.embeddings)
    inputs = {"annotations": args.annotations, "embeddings": args.embeddings}
    base_model = None
    if args.base:
        base_model, _ = miner.load_miner(args.base)
        inputs["base"] = args.base
        model_config = base_model.config
    else:
        model_config = _miner_config(args, config)
        if model_config.d_word != table.d_word:
            model_config = miner.MinerConfig(
                **{**model_config.__dict__, "d_word": table.d_word}
            )
    model, history = miner.train_miner(
        corpus, table, cfg, model=base_model, config=model_config,
    )
    out = Path(args.out)
    miner.save_miner(str(out), model, history, cfg)
    stem = out.with_suffix("")
    _json_out(Path(str(stem) + ".loss.json"),
              {"epochs": cfg.epochs, "history": history})
    if history:
        report.plot_loss_curve(history, str(stem) + ".loss.png")
    resolved = {"lr": cfg.lr0, "decay": cfg.decay, "epochs": cfg.epochs,
                "seed": seed, "model": model.config.__dict__,
                "messages": len(corpus), "fine_tuned": bool(args.base)}
    _write_manifest(out.with_suffix(out.suffix + ".manifest.json"),
                    "train-miner", resolved, inputs)
    final = history[-1] if history else float("nan")
    print("trained miner on %d messages for %d epochs (final loss %.4f) -> %s"
          % (len(corpus), cfg.epochs, final, out), file=sys.stderr)
    return 0


def _cmd_parse(args, config) -> int:
    drop = int(_resolve(args, config, "drop_columns", 0))
    messages = logio.read_raw_messages(args.input, drop)
    model, _ = miner.load_miner(args.model)
    table = features.load_embeddings(args.embeddings)
    inputs = {"input": args.input, "model": args.model,
              "embeddings": args.embeddings}
    kb = knowledge.KnowledgeBase()
    if args.kb:
        kb = knowledge.kb_load(args.kb)
        inputs["kb"] = args.kb
    results = []
    miner_outputs = []
    for message in messages:
        out = miner.infer_message(message, model, table)
        results.append(jparser.parse_message(message, out, kb))
        if args.miner_out:
            miner_outputs.append(out)
    out_path = Path(args.out)
    jparser.write_parse_results(str(out_path), results)
    if args.miner_out:
        miner.write_miner_outputs(args.miner_out, miner_outputs)
    if args.kb_out:
        knowledge.kb_save(args.kb_out, kb)
    resolved = {"drop_columns": drop, "messages": len(messages),
                "kb_in": args.kb, "kb_out": args.kb_out}
    _write_manifest(out_path.with_suffix(out_path.suffix + ".manifest.json"),
                    "parse", resolved, inputs)
    print("parsed %d messages -> %s" % (len(messages), out_path),
          file=sys.stderr)
    return 0


def _cmd_eval_miner(args, config) -> int:
    corpus = logio.read_annotations(args.annotations)
    model, _ = miner.load_miner(args.model)
    table = features.load_embeddings(args.embeddings)
    predicted = []
    gold = []
    for ann in corpus:
        output = miner.infer_message(ann.message, model, table)
        predicted.append(miner.oriented_pairs(output))
        gold.append(set(ann.gold_pairs))
    prf = downstream.eval_ci_pairs(predicted, gold)
    out = Path(args.out)
    payload = {
        "precision": prf.precision, "recall": prf.recall, "f1": prf.f1,
        "correct": prf.correct, "predicted": prf.predicted, "gold": prf.gold,
        "messages": len(corpus),
    }
    _json_out(out, payload)
    figure = str(out.with_suffix(".png"))
    report.plot_metric_bars(
        {"precision": prf.precision, "recall": prf.recall, "f1": prf.f1},
        figure, title="CI-pair extraction",
    )
    _write_manifest(out.with_suffix(out.suffix + ".manifest.json"),
                    "eval-miner", {"messages": len(corpus)},
                    {"annotations": args.annotations, "model": args.model,
                     "embeddings": args.embeddings})
    print("CI pairs: P=%.4f R=%.4f F1=%.4f -> %s"
          % (prf.precision, prf.recall, prf.f1, out), file=sys.stderr)
    return 0


def _classifier_common(args, config, diagnose: bool):
    seed = _resolve_seed(args, config)
    key_concept = _resolve(args, config, "key_concept", "request")
    feature_mode = _resolve(args, config, "features", "full")
    if feature_mode not in ("full", "template-only"):
        raise CliError("unknown feature mode %r" % feature_mode)
    ratio = float(_resolve(args, config, "ratio", 0.5))
    balance = _resolve(args, config, "balance", not diagnose)
    cfg = neuralcore.TrainConfig(
        lr0=float(_resolve(args, config, "lr", 0.05)),
        decay=float(_resolve(args, config, "decay", 0.005)),
        epochs=int(_resolve(args, config, "epochs", 8)),
        seed=seed,
    )
    hidden = int(_resolve(args, config, "hidden", 64))
    arch = _resolve(args, config, "arch", "lstm")

    results = jparser.read_parse_results(args.parsed)
    labels = synth.read_labels(args.labels)
    table = features.load_embeddings(args.embeddings)
    label_map = {lab.key: lab for lab in labels}
    sessions = downstream.build_sessions(results, key_concept)
    feats, ys = [], []
    skipped = 0
    for session in sessions:
        if session.key == downstream.UNKEYED:
            continue
        lab = label_map.get(session.key)
        if lab is None:
            skipped += 1
            continue
        y = lab.failure_class if diagnose else lab.anomaly
        if y < 0:
            skipped += 1
            continue
        sf = downstream.extract_features(session, table)
        if feature_mode == "template-only":
            sf = downstream.template_only(sf)
        feats.append(sf)
        ys.append(int(y))
    if skipped:
        print("skipped %d sessions without usable labels" % skipped,
              file=sys.stderr)
    pairs = list(zip(feats, ys))
    train, test = downstream.split_sessions(pairs, ratio=ratio, seed=seed)
    resolved = {"seed": seed, "key_concept": key_concept,
                "features": feature_mode, "ratio": ratio,
                "balance": bool(balance), "hidden": hidden, "arch": arch,
                "lr": cfg.lr0, "decay": cfg.decay, "epochs": cfg.epochs,
                "train_sessions": len(train), "test_sessions": len(test)}
    return cfg, hidden, arch, bool(balance), train, test, resolved


def _cmd_detect(args, config) -> int:
    cfg, hidden, arch, balance, train, test, resolved = _classifier_common(
        args, config, diagnose=False,
    )
    model, history = downstream.train_session_classifier(
        [f for f, _ in train], [y for _, y in train], classes=2, cfg=cfg,
        hidden=hidden, arch=arch, balance=balance,
    )
    predictions = [downstream.predict_topk(model, f, 1)[0] for f, _ in test]
    prf = downstream.eval_binary(predictions, [y for _, y in test])
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    downstream.save_classifier(str(outdir / "classifier.ckpt"), model,
                               history, cfg)
    payload = {
        "task": "anomaly-detection",
        "precision": prf.precision, "recall": prf.recall, "f1": prf.f1,
        "test_anomalies": sum(y for _, y in test),
        "config": resolved,
    }
    _json_out(outdir / "metrics.json", payload)
    report.plot_metric_bars(
        {"precision": prf.precision, "recall": prf.recall, "f1": prf.f1},
        str(outdir / "metrics.png"), title="Anomaly detection",
    )
    _write_manifest(outdir / "manifest.json", "detect", resolved,
                    {"parsed": args.parsed, "labels": args.labels,
                     "embeddings": args.embeddings})
    print("detection: P=%.4f R=%.4f F1=%.4f -> %s"
          % (prf.precision, prf.recall, prf.f1, outdir), file=sys.stderr)
    return 0


def _cmd_diagnose(args, config) -> int:
    cfg, hidden, arch, balance, train, test, resolved = _classifier_common(
        args, config, diagnose=True,
    )
    classes = int(_resolve(args, config, "classes", 16))
    model, history = downstream.train_session_classifier(
        [f for f, _ in train], [y for _, y in train], classes=classes,
        cfg=cfg, hidden=hidden, arch=arch, balance=balance,
    )
    ks = [k for k in (1, 2, 3) if k <= classes]
    recalls = downstream.recall_at_k(
        model, [f for f, _ in test], [y for _, y in test], ks,
    )
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    downstream.save_classifier(str(outdir / "classifier.ckpt"), model,
                               history, cfg)
    payload = {
        "task": "failure-diagnosis",
        "classes": classes,
        "recall_at": {str(k): recalls[k] for k in ks},
        "config": resolved,
    }
    _json_out(outdir / "metrics.json", payload)
    report.plot_recall_at_k(recalls, str(outdir / "metrics.png"),
                            title="Failure diagnosis")
    _write_manifest(outdir / "manifest.json", "diagnose", resolved,
                    {"parsed": args.parsed, "labels": args.labels,
                     "embeddings": args.embeddings})
    print("diagnosis: " + " ".join("R@%d=%.4f" % (k, recalls[k]) for k in ks)
          + " -> %s" % outdir, file=sys.stderr)
    return 0


def _cmd_synth(args, config) -> int:
    seed = _resolve_seed(args, config)
    spec = synth.load_genspec(args.spec)
    sessions = _resolve(args, config, "sessions", None)
    result = synth.synth_generate(
        spec, seed=seed, sessions=None if sessions is None else int(sessions),
    )
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "raw.log", "w", encoding="utf-8") as fh:
        for line in result.raw_lines:
            fh.write(line + "\n")
    logio.write_annotations(str(outdir / "annotations.jsonl"), result.annotated)
    synth.write_labels(str(outdir / "labels.tsv"), result.labels)
    lengths = [end - start for start, end in result.spans]
    report.plot_histogram(lengths, str(outdir / "sessions.png"),
                          title="Session lengths", xlabel="messages")
    resolved = {"seed": seed, "sessions": len(result.labels),
                "messages": len(result.annotated),
                "anomalies": sum(lab.anomaly for lab in result.labels),
                "mean_session_length": float(np.mean(lengths))}
    _write_manifest(outdir / "manifest.json", "synth", resolved,
                    {"spec": args.spec})
    print("generated %d sessions, %d messages -> %s"
          % (len(result.labels), len(result.annotated), outdir),
          file=sys.stderr)
    return 0


def _cmd_gradcheck(args, config) -> int:
    seed = _resolve_seed(args, config)
    eps = float(_resolve(args, config, "eps", 1e-5))
    samples = int(_resolve(args, config, "samples", 25))
    count = int(_resolve(args, config, "messages", 5))
    tolerance = float(_resolve(args, config, "tolerance", 1e-4))
    pool = logio.read_annotations(args.annotations)
    if not pool:
        raise CliError("no annotated messages to check against")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(pool), size=min(count, len(pool)), replace=False)
    corpus = [pool[int(i)] for i in picks]
    model, _ = miner.load_miner(args.model)
    table = features.load_embeddings(args.embeddings)

    def loss_fn(compute_grads: bool):
        total = 0.0
        sigs = []
        for ann in corpus:
            loss, sig = model.message_loss(
                ann, table, compute_grads=compute_grads, with_signature=True,
            )
            total += loss
            sigs.append(sig)
        return total, b"".join(sigs)

    worst = neuralcore.gradient_check(
        loss_fn, model.params(), eps=eps, samples=samples, seed=seed,
        tolerance=tolerance,
    )
    passed = worst <= tolerance
    print(json.dumps({
        "max_relative_error": worst, "tolerance": tolerance,
        "messages": len(corpus), "pass": passed,
    }))
    if not passed:
        print("gradient check failed: %.3e > %.3e" % (worst, tolerance),
              file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# Parser wiring
# ---------------------------------------------------------------------------

def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="TOML file with option defaults")
    sub.add_argument("--seed", type=int, help="run seed (default 42)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=PROG,
        description="Semantic log parsing and downstream analysis.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("train-embeddings",
                        help="train skip-gram embeddings from raw logs")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--negatives", type=int)
    p.add_argument("--min-count", dest="min_count", type=int)
    p.add_argument("--drop-columns", dest="drop_columns", type=int)
    _add_common(p)
    p.set_defaults(func=_cmd_train_embeddings)

    p = subs.add_parser("train-miner",
                        help="train the semantic miner on annotations")
    p.add_argument("--annotations", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--base", help="checkpoint to fine-tune from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--decay", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--no-char", dest="use_char", action="store_const",
                   const=False)
    p.add_argument("--no-local", dest="use_local", action="store_const",
                   const=False)
    p.add_argument("--no-lstm", dest="use_lstm", action="store_const",
                   const=False)
    p.add_argument("--no-interval", dest="use_interval", action="store_const",
                   const=False)
    _add_common(p)
    p.set_defaults(func=_cmd_train_miner)

    p = subs.add_parser("parse", help="parse raw logs into templates + pairs")
    p.add_argument("--input", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kb", help="knowledge base to continue from")
    p.add_argument("--kb-out", dest="kb_out",
                   help="write the final knowledge base here")
    p.add_argument("--miner-out", dest="miner_out",
                   help="also write raw miner outputs (JSONL)")
    p.add_argument("--drop-columns", dest="drop_columns", type=int)
    _add_common(p)
    p.set_defaults(func=_cmd_parse)

    p = subs.add_parser("eval-miner",
                        help="score CI-pair extraction against annotations")
    p.add_argument("--annotations", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_eval_miner)

    for name, helptext, func in (
        ("detect", "train and score the anomaly detector", _cmd_detect),
        ("diagnose", "train and score the failure diagnoser", _cmd_diagnose),
    ):
        p = subs.add_parser(name, help=helptext)
        p.add_argument("--parsed", required=True)
        p.add_argument("--labels", required=True)
        p.add_argument("--embeddings", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--key-concept", dest="key_concept")
        p.add_argument("--features", choices=("full", "template-only"))
        p.add_argument("--ratio", type=float)
        p.add_argument("--hidden", type=int)
        p.add_argument("--arch", choices=("lstm", "meanpool"))
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--decay", type=float)
        p.add_argument("--balance", action="store_const", const=True)
        p.add_argument("--no-balance", dest="balance", action="store_const",
                       const=False)
        if name == "diagnose":
            p.add_argument("--classes", type=int)
        _add_common(p)
        p.set_defaults(func=func)

    p = subs.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sessions", type=int)
    _add_common(p)
    p.set_defaults(func=_cmd_synth)

    p = subs.add_parser("gradcheck",
                        help="finite-difference check of miner gradients")
    p.add_argument("--model", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--messages", type=int)
    p.add_argument("--eps", type=float)
    p.add_argument("--samples", type=int)
    p.add_argument("--tolerance", type=float)
    _add_common(p)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config(args.config)
        return args.func(args, config)
    except (ValueError, OSError) as exc:
        print("error: %s: %s" % (args.command, exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
