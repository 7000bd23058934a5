"""Command line front end: ``vhred {train,generate,evaluate,gradcheck,synthesize,presets}``.

Every subcommand writes into a run directory (``--out``); relative paths are
placed under ``$VHRED_RUN_ROOT`` when that variable is set.  Each run
directory gets a ``config.txt`` snapshot.

Config files are flat ``key = value`` lines (``#`` starts a comment).  Keys
are the model fields (emb_dim, enc_dim, ctx_dim, dec_dim, gate_dim,
latent_dim, bidirectional, carry_encoder_state, gating, latent_layers,
covariance_scale, rnnlm_cell, rnnlm_hidden, kind), the training fields
(learning_rate, batch_size, clip_threshold, kl_ramp_batches, word_drop_rate,
validate_every, patience, max_batches, seed, max_unroll, valid_samples,
log_wall_time) and preset, corpus, valid, vocab_limit, warm_start.
Precedence: command-line flags > config file > preset.  ``train --config
RUN/config.txt`` replays a run.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import data as data_mod
from .data import SyntheticSpec, Vocabulary, load_corpus, write_synthetic
from .decoding import DecodeConfig, rollout
from .diagnostics import GRADCHECK_SIZES, elbo_gradcheck
from .evaluation import (EmbeddingTable, PreferenceCounts, UnigramModel, metric_report,
                         preference_ci, response_stats, write_report)
from .models import ModelBundle, ModelConfig, warm_start_from_hred
from .presets import PRESETS, preset
from .training import TrainConfig, format_log_row, train

logger = logging.getLogger("vhred")

RUN_ROOT_ENV = "VHRED_RUN_ROOT"
GRADCHECK_FAIL = 1e-3
MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"vocab_size", "seed"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
RUN_KEYS = {"preset", "corpus", "valid", "vocab_limit", "warm_start"}


class CliError(RuntimeError):
    pass


def run_dir(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(RUN_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def read_config_file(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in MODEL_KEYS | TRAIN_KEYS | RUN_KEYS:
            raise CliError(f"{path}:{lineno}: unknown key {k!r}")
        out[k] = v
    return out


def write_config_file(path, values: dict):
    lines = [f"{k} = {_fmt(v)}" for k, v in sorted(values.items())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(raw: str, like):
    if raw.lower() == "none":
        return None
    if isinstance(like, bool):
        if raw.lower() not in ("true", "false", "1", "0"):
            raise CliError(f"expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


def resolve_train_settings(args) -> tuple[dict, ModelConfig, TrainConfig]:
    file_vals = read_config_file(args.config) if args.config else {}
    name = args.preset or file_vals.get("preset") or "toy"
    p = preset(name)
    model_vals, train_vals = asdict(p.model), asdict(p.train)
    run_vals = {"preset": name, "corpus": None, "valid": None, "vocab_limit": p.vocab_limit,
                "warm_start": None}
    types = {**model_vals, **train_vals}
    defaults_for_none = {"max_unroll": 0, "vocab_limit": 0}

    def put(k, v):
        if k in model_vals:
            model_vals[k] = v
        if k in train_vals:
            train_vals[k] = v
        if k in run_vals:
            run_vals[k] = v

    for k, raw in file_vals.items():
        like = types.get(k, run_vals.get(k))
        if like is None:
            like = defaults_for_none.get(k, "")
        put(k, _coerce(raw, like))
    flag_map = {"corpus": args.corpus, "valid": args.valid, "vocab_limit": args.vocab_limit,
                "warm_start": args.warm_start, "learning_rate": args.lr,
                "batch_size": args.batch_size, "max_batches": args.max_batches,
                "seed": args.seed, "kl_ramp_batches": args.kl_ramp,
                "word_drop_rate": args.word_drop, "validate_every": args.validate_every,
                "patience": args.patience, "log_wall_time": args.log_wall_time or None}
    for k, v in flag_map.items():
        if v is not None:
            put(k, v)
    for item in args.set or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        k, raw = (s.strip() for s in item.split("=", 1))
        if k not in MODEL_KEYS | TRAIN_KEYS | RUN_KEYS:
            raise CliError(f"unknown key {k!r}")
        like = types.get(k, run_vals.get(k))
        put(k, _coerce(raw, defaults_for_none.get(k, "") if like is None else like))
    if not run_vals["corpus"]:
        raise CliError("train needs --corpus (or corpus = ... in the config file)")
    model_vals["seed"] = train_vals["seed"]
    return run_vals, ModelConfig(**model_vals), TrainConfig(**train_vals)


# -------------------------------------------------------------- subcommands

def cmd_train(args) -> int:
    run_vals, mcfg, tcfg = resolve_train_settings(args)
    p = PRESETS[run_vals["preset"]]
    print(f"preset {p.name} v{p.version} checksum {p.checksum}")
    out = run_dir(args.out)
    corpus, vocab = load_corpus(run_vals["corpus"], run_vals["vocab_limit"] or None)
    valid = corpus
    if run_vals["valid"]:
        valid, _ = load_corpus(run_vals["valid"], vocab=vocab)
    mcfg = replace(mcfg, vocab_size=len(vocab))
    snapshot = {**run_vals, **{k: v for k, v in asdict(mcfg).items() if k in MODEL_KEYS},
                **asdict(tcfg)}
    write_config_file(out / "config.txt", snapshot)
    vocab.save(out / "vocab.txt")
    model = ModelBundle(mcfg, vocab)
    if run_vals["warm_start"]:
        src, _ = ModelBundle.load(run_vals["warm_start"])
        if model.kind == "vhred" and src.kind == "hred":
            warm_start_from_hred(model, src)
        else:
            model.load_state_dict(src.state_dict())
    result = train(model, corpus, valid, tcfg, log_path=out / "train.log",
                   checkpoint_path=out / "best.ckpt")
    with open(out / "validation.tsv", "w", encoding="utf-8") as fh:
        fh.write("batch\tvalue\timproved\treconstruction_per_token\tkl_per_utterance\tmc_bound\tmc_stderr\n")
        for v in result.validations:
            det, mc = v.get("deterministic", {}), v.get("monte_carlo", {})
            fh.write(f"{v['batch']}\t{v['value']:.10g}\t{int(v['improved'])}\t"
                     f"{det.get('reconstruction_per_token', float('nan')):.10g}\t"
                     f"{det.get('kl_per_utterance', float('nan')):.10g}\t"
                     f"{mc.get('bound_per_token', float('nan')):.10g}\t{mc.get('stderr', float('nan')):.10g}\n")
    with open(out / "timing.tsv", "w", encoding="utf-8") as fh:
        fh.write("batch\tseconds\n")
        fh.writelines(f"{r['batch']}\t{r['seconds']:.3f}\n" for r in result.log)
    last = result.log[-1] if result.log else None
    print(f"stopped: {result.stop_reason} after {len(result.log)} batches; best at batch "
          f"{result.best_batch}" + (f"; last row: {format_log_row(last, False)}" if last else ""))
    return 0


def _read_lines(path) -> list[list[str]]:
    text = Path(path).read_text(encoding="utf-8").split("\n")
    if text and text[-1] == "":
        text.pop()
    return [[t for t in line.split() if t != data_mod.SEPARATOR] for line in text]


def cmd_generate(args) -> int:
    model, meta = ModelBundle.load(args.checkpoint)
    if model.vocab is None:
        raise CliError("checkpoint carries no vocabulary")
    out = run_dir(args.out)
    cfg = DecodeConfig(beam_width=args.beam, max_tokens=args.max_tokens,
                       latent_mode=args.latent_mode, seed=args.seed)
    write_config_file(out / "config.txt", {"checkpoint": str(args.checkpoint),
                                           "context_file": str(args.context_file),
                                           "n_turns": args.n_turns, **asdict(cfg)})
    contexts, _ = load_corpus(args.context_file, vocab=model.vocab)
    lines = []
    for ctx in contexts:
        turns = rollout(model, ctx, args.n_turns, cfg)
        lines.append(f" {data_mod.SEPARATOR} ".join(" ".join(model.vocab.decode(t.tokens))
                                                     for t in turns))
    (out / "responses.txt").write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    print(f"wrote {len(lines)} responses to {out / 'responses.txt'}")
    return 0


def cmd_evaluate(args) -> int:
    out = run_dir(args.out)
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = set(metrics) - {"avg", "greedy", "extrema", "stats", "ci"}
    if unknown:
        raise CliError(f"unknown metrics: {', '.join(sorted(unknown))}")
    write_config_file(out / "config.txt", {k: v for k, v in vars(args).items()
                                           if k not in ("func",)})
    summary = {}
    responses = _read_lines(args.responses) if args.responses else None
    emb_metrics = [m for m in metrics if m in ("avg", "greedy", "extrema")]
    if emb_metrics:
        if not (args.references and args.embeddings and responses is not None):
            raise CliError("embedding metrics need --responses, --references and --embeddings")
        table = EmbeddingTable.load(args.embeddings)
        rows, agg = metric_report(responses, _read_lines(args.references), table, emb_metrics)
        write_report(out / "report.tsv", rows, agg)
        summary.update({k: v for k, v in agg.items() if k != "index"})
    if "stats" in metrics:
        if not (args.train_corpus and responses is not None):
            raise CliError("stats needs --responses and --train-corpus")
        raw = data_mod.read_corpus_text(args.train_corpus)
        uni = UnigramModel.from_texts(u for d in raw for u in d)
        st = response_stats(responses, uni)
        summary.update(length=st.length, word_entropy_bits=st.word_entropy,
                       utterance_entropy_bits=st.utterance_entropy)
    if "ci" in metrics:
        if not args.preferences:
            raise CliError("ci needs --preferences wins,losses,ties")
        w, l, t = (int(x) for x in args.preferences.split(","))
        (wp, wm), (lp, lm), (tp, tm) = preference_ci(PreferenceCounts(w, l, t), args.level)
        summary.update(win=wp, win_margin=wm, loss=lp, loss_margin=lm, tie=tp, tie_margin=tm)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    for k in sorted(summary):
        v = summary[k]
        print(f"{k}\t{'NA' if v is None else (f'{v:.6f}' if isinstance(v, float) else v)}")
    return 0


def cmd_gradcheck(args) -> int:
    p = preset(args.preset)
    print(f"preset {p.name} v{p.version} checksum {p.checksum}")
    cfg = p.model
    max_entries = None
    if args.full_size:
        cfg = replace(cfg, vocab_size=max(cfg.vocab_size, 8))
        max_entries = args.max_entries
    else:
        cfg = replace(cfg, **GRADCHECK_SIZES)
    disc = elbo_gradcheck(cfg, seed=args.seed, eps=args.eps, max_entries=max_entries)
    ok = disc < GRADCHECK_FAIL
    if args.out:
        out = run_dir(args.out)
        write_config_file(out / "config.txt", {"preset": p.name, "seed": args.seed, "eps": args.eps,
                                               "full_size": args.full_size})
        (out / "gradcheck.txt").write_text(f"max_relative_discrepancy\t{disc:.6e}\n", encoding="utf-8")
    print(f"max relative discrepancy {disc:.3e} ({'ok' if ok else 'FAIL'})")
    return 0 if ok else 1


def cmd_synthesize(args) -> int:
    spec = SyntheticSpec(n_topics=args.topics, words_per_topic=args.words_per_topic,
                         stickiness=args.stickiness, min_len=args.min_len, max_len=args.max_len,
                         min_turns=args.min_turns, max_turns=args.max_turns,
                         n_dialogues=args.dialogues, seed=args.seed)
    out = run_dir(args.out)
    write_config_file(out / "config.txt", asdict(spec))
    write_synthetic(spec, out / "corpus.txt", out / "labels.txt")
    print(f"wrote {spec.n_dialogues} dialogues to {out / 'corpus.txt'}")
    return 0


def cmd_presets(args) -> int:
    for name in sorted(PRESETS):
        p = PRESETS[name]
        print(f"{name}\t{p.model.kind}\t{p.checksum}\t{p.sizes}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vhred", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--preset", choices=sorted(PRESETS))
    t.add_argument("--config", help="flat key=value config file")
    t.add_argument("--corpus")
    t.add_argument("--valid")
    t.add_argument("--out", required=True)
    t.add_argument("--vocab-limit", type=int)
    t.add_argument("--warm-start", help="checkpoint to initialize from (HRED -> VHRED allowed)")
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--max-batches", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--kl-ramp", type=int)
    t.add_argument("--word-drop", type=float)
    t.add_argument("--validate-every", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--log-wall-time", action="store_true")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="generate responses with beam search")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--context-file", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--n-turns", type=int, default=1)
    g.add_argument("--beam", type=int, default=5)
    g.add_argument("--max-tokens", type=int, default=30)
    g.add_argument("--latent-mode", choices=("prior_sample", "prior_mean"), default="prior_sample")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="score responses")
    e.add_argument("--responses")
    e.add_argument("--references")
    e.add_argument("--embeddings")
    e.add_argument("--metrics", default="avg,greedy,extrema")
    e.add_argument("--train-corpus", help="corpus file for the unigram model (stats)")
    e.add_argument("--preferences", help="wins,losses,ties (ci)")
    e.add_argument("--level", type=float, default=0.90)
    e.add_argument("--out", default="evaluation")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("gradcheck", help="finite-difference check of the training objective")
    c.add_argument("--preset", default="toy", choices=sorted(PRESETS))
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--eps", type=float, default=1e-4)
    c.add_argument("--full-size", action="store_true",
                   help="use the preset's own sizes and sample --max-entries coordinates")
    c.add_argument("--max-entries", type=int, default=300)
    c.add_argument("--out")
    c.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synthesize", help="write a synthetic topic corpus")
    s.add_argument("--topics", type=int, default=4)
    s.add_argument("--stickiness", type=float, default=0.5)
    s.add_argument("--words-per-topic", type=int, default=6)
    s.add_argument("--min-len", type=int, default=3)
    s.add_argument("--max-len", type=int, default=6)
    s.add_argument("--min-turns", type=int, default=3)
    s.add_argument("--max-turns", type=int, default=4)
    s.add_argument("--dialogues", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synthesize)

    sub.add_parser("presets", help="list presets").set_defaults(func=cmd_presets)
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, KeyError, ValueError, OSError, RuntimeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
