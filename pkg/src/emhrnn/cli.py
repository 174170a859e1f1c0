"""Command-line entry point: ``emhrnn {simgen,train,eval,segment}``.

Options come from an optional JSON config file (``--config``) overlaid by
command-line flags; a flag always wins.  Unknown config keys are rejected
before any work starts.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import data_io, simgen
from .em import TrainConfig, select_learning_rate, train
from .model import Document, ModelParams, Plan, evaluate, impute, indicator_probs_batch, phrase_lengths, trace_from
from . import autodiff as ad

log = logging.getLogger("emhrnn")

ARCHIVE_FORMAT = "emhrnn-model"
ARCHIVE_VERSION = 1


class ArchiveError(ValueError):
    pass


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# model archive

def archive_dict(params: ModelParams, metadata: dict | None = None) -> dict:
    tensors = {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
               for k, v in params.state_dict().items()}
    return {"format": ARCHIVE_FORMAT, "version": ARCHIVE_VERSION,
            "metadata": metadata or {}, "tensors": tensors}


def dumps_archive(params: ModelParams, metadata: dict | None = None) -> str:
    return json.dumps(archive_dict(params, metadata), sort_keys=True, indent=1) + "\n"


def save_archive(path, params: ModelParams, metadata: dict | None = None) -> None:
    Path(path).write_text(dumps_archive(params, metadata), encoding="utf-8")


def load_archive(path) -> tuple[ModelParams, dict]:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ArchiveError(f"cannot read model {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ArchiveError(f"{path} is not a model archive ({exc})") from exc
    if raw.get("format") != ARCHIVE_FORMAT:
        raise ArchiveError(f"{path} is not a model archive")
    if raw.get("version") != ARCHIVE_VERSION:
        raise ArchiveError(f"{path}: archive version {raw.get('version')} unsupported "
                           f"(expected {ARCHIVE_VERSION})")
    state = {}
    for k, t in raw["tensors"].items():
        data = np.array(t["data"], dtype=np.float64)
        if data.size != int(np.prod(t["shape"])):
            raise ArchiveError(f"{path}: tensor {k} has {data.size} values for shape {t['shape']}")
        state[k] = data.reshape(t["shape"])
    try:
        return ModelParams.from_state_dict(state), raw.get("metadata", {})
    except (KeyError, TypeError, ValueError) as exc:
        raise ArchiveError(f"{path}: incomplete or inconsistent tensors ({exc})") from exc


# ---------------------------------------------------------------------------
# corpora

def load_corpus(path, embeddings=None, d_emb=None, class_count: int = 0):
    """Read either a synthetic vector corpus or a text corpus.

    Returns ``(docs, true_z or None, tokens or None)``.
    """
    records = data_io.read_jsonl(path)
    if not records:
        raise data_io.CorpusError(f"{path}: corpus is empty")
    if "sentences" in records[0]:
        corpus = simgen.read_corpus(path)
        tokens = [[f"w{t + 1}" for t in range(d.n)] for d in corpus.docs]
        return corpus.docs, corpus.true_z, tokens
    if embeddings is None:
        raise UsageError("a text corpus needs --embeddings")
    raw = data_io.RawCorpus(records, class_count)
    vocab = data_io.load_embeddings(embeddings, d_emb)
    docs = raw.documents(vocab)
    tokens = [[t for s in data_io.split_sentences_tokenize(r["text"]) for t in s] for r in records]
    return docs, None, tokens


# ---------------------------------------------------------------------------
# reports

def phrase_length_stats(lengths) -> dict:
    """Mean, min, max and histogram of phrase lengths.

    A phrase length counts the tokens after one boundary up to and including
    the next; sentence ends always close a phrase.
    """
    lengths = [int(x) for x in lengths]
    if not lengths:
        return {"count": 0, "mean": None, "min": None, "max": None, "histogram": {}}
    hist = Counter(lengths)
    return {"count": len(lengths), "mean": float(np.mean(lengths)), "min": min(lengths),
            "max": max(lengths), "histogram": {str(k): hist[k] for k in sorted(hist)}}


def render_segmented(tokens, segments) -> str:
    out = []
    for sent in segments:
        for a, b in sent:
            out.extend(tokens[a:b])
            out.append("//")
    return " ".join(out)


def segment_report(params: ModelParams, docs, tokens, assignments=None) -> dict:
    """Per-document segmentations, attention weights and corpus length stats.

    ``assignments`` replaces the model's imputed indicators when given.
    """
    if assignments is None:
        assignments = [impute(p) for p in indicator_probs_batch(params, docs)]
    with ad.no_grad():
        ev = evaluate(params, Plan(docs, [np.asarray(z)[None, :] for z in assignments]))
    per_doc, lengths = [], []
    for j, d in enumerate(docs):
        tr = trace_from(ev, j, 0)
        lens = phrase_lengths(d, tr.z)
        lengths.extend(lens)
        s = int(np.argmax(tr.gamma))
        p = int(np.argmax(tr.beta[s]))
        w = int(np.argmax(tr.alpha[s][p]))
        top = tr.segments[s][p][0] + w
        per_doc.append({
            "doc": j,
            "segmented": render_segmented(tokens[j], tr.segments),
            "z": [int(b) for b in tr.z],
            "pi": [float(x) for x in tr.pi],
            "phrase_lengths": lens,
            "alpha": [[a.tolist() for a in sent] for sent in tr.alpha],
            "beta": [b.tolist() for b in tr.beta],
            "gamma": tr.gamma.tolist(),
            "top_word": {"index": top, "token": tokens[j][top]},
        })
    return {"documents": per_doc, "phrase_length_stats": phrase_length_stats(lengths)}


def eval_metrics(params: ModelParams, docs, true_z=None) -> dict:
    from .model import predict_batch

    labels, zs, _ = predict_batch(params, docs)
    gold = np.array([d.label for d in docs])
    counts = np.bincount(gold, minlength=params.n_classes)
    out = {"docs": len(docs), "accuracy": float(np.mean(labels == gold)),
           "majority_share": float(counts.max() / len(docs)),
           "class_counts": {str(c + 1): int(k) for c, k in enumerate(counts)},
           "predicted_counts": {str(c + 1): int(k)
                                for c, k in enumerate(np.bincount(labels, minlength=params.n_classes))}}
    if true_z is not None:
        c = simgen.recovery_counts(zs, true_z)
        out["recovery"] = c["correct"] / c["total"]
        out["forced_recovery"] = c["forced_correct"] / c["forced_total"]
    return out


# ---------------------------------------------------------------------------
# option handling

DEFAULTS = {
    "simgen": {"seed": 0, "n_train": 10000, "n_test": 1000, "data_seed": None, "teacher_seed": None,
               "indicator_mode": "independent", "out": "synthetic"},
    "train": {"seed": 0, "strategy": "exact", "epochs": 1, "lr": 0.1, "momentum": 0.9, "batch": 64,
              "m_step_passes": 1, "q_reduction": "sum", "K": None, "M": 1, "max_exact_n": 16, "max_halvings": 8,
              "d_h": 50, "d_a": 50, "d_emb": 100, "n_classes": 0, "corpus": None, "embeddings": None,
              "test_corpus": None, "select_lr": False, "out": "model.json", "history": None},
    "eval": {"model": None, "corpus": None, "embeddings": None, "d_emb": None, "out": None, "seed": 0},
    "segment": {"model": None, "corpus": None, "embeddings": None, "d_emb": None, "out": None,
                "z_source": "model", "seed": 0},
}


def _flag(p, name, **kw):
    p.add_argument("--" + name.replace("_", "-"), dest=name, default=argparse.SUPPRESS, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emhrnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        _flag(p, "config", help="JSON file of options; flags override it")
        _flag(p, "seed", type=int)
        _flag(p, "out", help="output path")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("simgen", help="write synthetic train/test corpora")
    common(p)
    _flag(p, "n_train", type=int)
    _flag(p, "n_test", type=int)
    _flag(p, "data_seed", type=int, help="defaults to --seed")
    _flag(p, "teacher_seed", type=int, help="defaults to --seed")
    _flag(p, "indicator_mode", choices=simgen.MODES)

    p = sub.add_parser("train", help="fit a model by EM")
    common(p)
    _flag(p, "corpus")
    _flag(p, "embeddings")
    _flag(p, "test_corpus", help="synthetic corpus scored for recovery every epoch")
    _flag(p, "strategy", help="exact, nonoverlap:<l> or local")
    _flag(p, "epochs", type=int)
    _flag(p, "lr", type=float)
    _flag(p, "momentum", type=float)
    _flag(p, "batch", type=int)
    _flag(p, "m_step_passes", type=int)
    _flag(p, "q_reduction", choices=("sum", "mean"), help="step on the summed (default) or mean batch Q")
    _flag(p, "K", type=int)
    _flag(p, "M", type=int)
    _flag(p, "max_exact_n", type=int)
    _flag(p, "max_halvings", type=int)
    _flag(p, "d_h", type=int)
    _flag(p, "d_a", type=int)
    _flag(p, "d_emb", type=int)
    _flag(p, "n_classes", type=int)
    _flag(p, "history", help="history JSONL path (default: <out>.history.jsonl)")
    p.add_argument("--select-lr", dest="select_lr", action="store_true", default=argparse.SUPPRESS,
                   help="pick the rate from {0.1, 0.05, 0.01} on a 10%% split")

    for name, text in (("eval", "score a model on a corpus"), ("segment", "dump segmentations")):
        p = sub.add_parser(name, help=text)
        common(p)
        _flag(p, "model")
        _flag(p, "corpus")
        _flag(p, "embeddings")
        _flag(p, "d_emb", type=int)
        if name == "segment":
            _flag(p, "z_source", choices=("model", "true"))
    return parser


def resolve_options(command: str, ns: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    opts = dict(DEFAULTS[command])
    flags = {k: v for k, v in vars(ns).items() if k not in ("command", "verbose", "config")}
    if getattr(ns, "config", None):
        try:
            cfg = json.loads(Path(ns.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise UsageError(f"cannot read config {ns.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {ns.config} is not valid JSON ({exc})") from exc
        if not isinstance(cfg, dict):
            raise UsageError(f"config {ns.config} must hold a JSON object")
        unknown = sorted(set(cfg) - set(opts))
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
        opts.update(cfg)
    opts.update(flags)
    return opts


def _require(opts, *names):
    for n in names:
        if opts.get(n) is None:
            raise UsageError(f"--{n.replace('_', '-')} is required")


# ---------------------------------------------------------------------------
# commands

def cmd_simgen(opts: dict) -> int:
    data_seed = opts["seed"] if opts["data_seed"] is None else opts["data_seed"]
    teacher_seed = opts["seed"] if opts["teacher_seed"] is None else opts["teacher_seed"]
    out = Path(opts["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc}") from exc
    train_c, test_c = simgen.generate_corpus(opts["n_train"], opts["n_test"], data_seed, teacher_seed,
                                             opts["indicator_mode"])
    simgen.write_corpus(out / "train.jsonl", train_c)
    simgen.write_corpus(out / "test.jsonl", test_c)
    manifest = {"n_train": len(train_c), "n_test": len(test_c), "data_seed": data_seed,
                "teacher_seed_requested": teacher_seed, "teacher_seed": train_c.teacher_seed,
                "indicator_mode": opts["indicator_mode"],
                "train_class_counts": {str(c): int((train_c.labels == c).sum()) for c in range(1, 6)}}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    print(f"wrote {len(train_c)} train / {len(test_c)} test documents to {out}")
    return 0


def _train_config(opts: dict) -> TrainConfig:
    return TrainConfig(strategy=opts["strategy"], learning_rate=opts["lr"], momentum=opts["momentum"],
                       batch_size=opts["batch"], m_step_passes=opts["m_step_passes"], epochs=opts["epochs"],
                       K=opts["K"], M=opts["M"], seed=opts["seed"], max_exact_n=opts["max_exact_n"],
                       max_halvings=opts["max_halvings"], q_reduction=opts["q_reduction"])


def cmd_train(opts: dict) -> int:
    _require(opts, "corpus")
    config = _train_config(opts)
    docs, true_z, _ = load_corpus(opts["corpus"], opts["embeddings"], opts["d_emb"], opts["n_classes"])
    n_classes = opts["n_classes"] or max(max(d.label for d in docs) + 1, 2)
    if max(d.label for d in docs) >= n_classes:
        raise UsageError(f"corpus has labels above --n-classes {n_classes}")
    params = ModelParams.init(np.random.default_rng(opts["seed"]), d_emb=docs[0].d_emb, d_h=opts["d_h"],
                              d_a=opts["d_a"], n_classes=n_classes)
    if opts["select_lr"]:
        lr = select_learning_rate(params, docs, config)
        config = TrainConfig(**{**config.to_dict(), "learning_rate": lr})
        print(f"selected learning rate {lr}")

    monitors = []
    if true_z is not None:
        monitors.append(simgen.recovery_monitor(simgen.SyntheticCorpus(docs, true_z, -1, -1), "train_"))
    if opts["test_corpus"]:
        test = simgen.read_corpus(opts["test_corpus"])
        if test.true_z is not None:
            monitors.append(simgen.recovery_monitor(test, "test_"))

    def monitor(p):
        rec = {}
        for m in monitors:
            rec.update(m(p))
        return rec

    params, history = train(params, docs, config, monitor)
    meta = {"train_config": config.to_dict(), "corpus": str(opts["corpus"]), "embeddings": opts["embeddings"],
            "d_emb": docs[0].d_emb, "epochs_run": len(history.records)}
    save_archive(opts["out"], params, meta)
    hist_path = opts["history"] or str(opts["out"]) + ".history.jsonl"
    Path(hist_path).write_text(history.to_jsonl(), encoding="utf-8")
    _print_table(history.records)
    print(f"model written to {opts['out']}, history to {hist_path}")
    return 0


def _print_table(records) -> None:
    if not records:
        return
    keys = [k for k in ("epoch", "strategy", "Q", "marginal_ll", "config_evals_per_doc", "accuracy",
                        "train_recovery", "test_recovery") if k in records[0]]
    print("  ".join(f"{k:>14}" for k in keys))
    for r in records:
        cells = []
        for k in keys:
            v = r[k]
            cells.append(f"{v:>14.6g}" if isinstance(v, float) else f"{str(v):>14}")
        print("  ".join(cells))


def _load_for_scoring(opts):
    _require(opts, "model", "corpus")
    params, meta = load_archive(opts["model"])
    emb = opts["embeddings"] or meta.get("embeddings")
    d_emb = opts["d_emb"] or meta.get("d_emb") or params.d_emb
    docs, true_z, tokens = load_corpus(opts["corpus"], emb, d_emb, params.n_classes)
    if docs[0].d_emb != params.d_emb:
        raise UsageError(f"corpus vectors have width {docs[0].d_emb}, model expects {params.d_emb}")
    if max(d.label for d in docs) >= params.n_classes:
        raise UsageError("corpus labels exceed the model's classes")
    return params, docs, true_z, tokens


def _emit(opts, payload) -> None:
    text = json.dumps(payload, sort_keys=True, indent=1) + "\n"
    if opts["out"]:
        Path(opts["out"]).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_eval(opts: dict) -> int:
    params, docs, true_z, _ = _load_for_scoring(opts)
    _emit(opts, eval_metrics(params, docs, true_z))
    return 0


def cmd_segment(opts: dict) -> int:
    params, docs, true_z, tokens = _load_for_scoring(opts)
    assignments = None
    if opts["z_source"] == "true":
        if true_z is None:
            raise UsageError("--z-source true needs a corpus with true_z")
        assignments = true_z
    report = segment_report(params, docs, tokens, assignments)
    _emit(opts, report)
    if opts["out"]:
        st = report["phrase_length_stats"]
        print(f"{len(docs)} documents, {st['count']} phrases, mean length {st['mean']:.4g}, "
              f"min {st['min']}, max {st['max']}")
    return 0


COMMANDS = {"simgen": cmd_simgen, "train": cmd_train, "eval": cmd_eval, "segment": cmd_segment}


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve_options(ns.command, ns)
        return COMMANDS[ns.command](opts)
    except (ValueError, OSError, KeyError, TypeError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"emhrnn {ns.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
