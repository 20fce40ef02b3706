"""Command line entry point: ``trec {train,sample,probe,eval,train-scorer}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Configuration precedence: built-in defaults < ``--config`` file < ``--set`` overrides < dedicated flags.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import torch

from .config import ABLATIONS, ConfigError, RunConfig
from .diagnostics import combo_probe, delta_bleu_probe, dynamics_summary
from .experiment import evaluate, load_checkpoint, read_corpus, read_sources, sample_source, train_run
from .sampler import SamplerConfig
from .scorer import ARScorer, train_scorer

log = logging.getLogger("trec")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_sampler_flags(p):
    p.add_argument("--steps", type=int, default=None, help="sampling steps (default 20)")
    p.add_argument("--delta", type=int, default=None, help="asymmetric offset in coarse-grid units (default 1)")
    p.add_argument("--b", type=int, default=None, help="candidates per source (default 5)")
    p.add_argument("--length-beams", type=int, default=None)
    p.add_argument("--mbr", choices=("bleu", "perplexity"), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--scorer", default=None, help="AR scorer checkpoint, required for --mbr perplexity")


def _sampler_from(args, base: SamplerConfig) -> SamplerConfig:
    b = args.b if args.b is not None else base.b
    return SamplerConfig(
        n_steps=args.steps if args.steps is not None else base.n_steps,
        delta=args.delta if args.delta is not None else base.delta,
        b=b,
        length_beams=args.length_beams if args.length_beams is not None else min(b, base.length_beams or 1),
        mbr_metric=args.mbr or base.mbr_metric,
        seed=args.seed if args.seed is not None else base.seed,
    )


def _load_scorer(path):
    if path is None:
        return None
    from .denoiser import DenoiserConfig

    state = torch.load(path, map_location="cpu", weights_only=True)
    if state.get("format") != "trec-scorer":
        raise UsageError(f"{path} is not a scorer checkpoint")
    scorer = ARScorer(DenoiserConfig(**state["config"]))
    scorer.load_state_dict(state["tensors"])
    return scorer.eval()


def _require_scorer(sampler: SamplerConfig, scorer):
    if sampler.mbr_metric == "perplexity" and scorer is None:
        raise UsageError("--mbr perplexity needs --scorer (train one with `trec train-scorer`)")


def cmd_train(args) -> int:
    if args.resume:
        run_dir = Path(args.resume)
        config = RunConfig.load(args.config or run_dir / "config.json", args.set)
        config.run.out_dir, config.run.run_id = str(run_dir.parent), run_dir.name
    else:
        config = RunConfig.load(args.config, args.set)
        if args.out:
            config.run.out_dir = args.out
        if args.run_id:
            config.run.run_id = args.run_id
    run_dir = train_run(config, force=args.force, resume=bool(args.resume))
    print(f"run directory: {run_dir}")
    print(f"checkpoint: {run_dir / 'checkpoints' / 'latest.pt'}")
    print(f"metrics: {run_dir / 'metrics.jsonl'}")
    return 0


def cmd_sample(args) -> int:
    ld = load_checkpoint(args.checkpoint)
    sampler = _sampler_from(args, ld.config.sampler)
    try:
        sampler.validate(ld.schedule.T)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    scorer = _load_scorer(args.scorer)
    _require_scorer(sampler, scorer)
    if args.source is not None:
        sources = [ld.vocab.encode(args.source.split())]
    elif args.input:
        sources = read_sources(args.input, ld.vocab)
    else:
        raise UsageError("give --input FILE or --source TEXT")
    out = open(args.output, "w", encoding="utf-8") if args.output else sys.stdout
    try:
        for i, src in enumerate(sources):
            if not src:
                raise UsageError(f"source {i} is empty")
            seed = sampler.seed + i
            cands, best = sample_source(src, ld.model, ld.schedule, sampler, seed, scorer)
            rec = {
                "source": ld.vocab.decode(src),
                "candidates": [{"tokens": ld.vocab.decode(c.tokens), "score": c.score} for c in cands],
                "selected": ld.vocab.decode(best.tokens),
                "seed": seed,
                "config": sampler.to_dict(),
            }
            out.write(json.dumps(rec) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    if args.output:
        print(f"samples: {args.output}", file=sys.stderr)
    return 0


def _default_valid(checkpoint) -> Path:
    return Path(checkpoint).resolve().parent.parent / "valid.tsv"


def cmd_probe(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.which == "dynamics":
        if not args.log:
            raise UsageError("dynamics needs --log METRICS.jsonl")
        summary = dynamics_summary(args.log, window=args.window)
        path = out_dir / "dynamics.csv"
        summary.write_csv(path)
        print(f"dynamics: {path} ({summary.n_records} records, {summary.n_malformed} malformed lines skipped)")
        return 0

    if not args.checkpoint:
        raise UsageError(f"{args.which} needs --checkpoint")
    ld = load_checkpoint(args.checkpoint)
    valid = read_corpus(args.valid or _default_valid(args.checkpoint), ld.vocab, ld.config.denoiser.max_len)
    valid = valid[: args.size]
    if not valid:
        raise UsageError("validation set is empty")
    g = torch.Generator().manual_seed(args.seed)
    step = int((ld.trainer_state or {}).get("step", 0))
    T = ld.schedule.T
    if args.which == "delta_bleu":
        t_grid = [T // 4, T // 2, 3 * T // 4]
        res = delta_bleu_probe(ld.model, valid, ld.schedule, t_grid, g, ld.policy, details=True)
        rec = {"step": step, **res}
        (out_dir / "delta_bleu.jsonl").write_text(json.dumps(rec) + "\n", encoding="utf-8")
        _write_csv(out_dir / "delta_bleu.csv", [(t, "delta_bleu", v) for t, v in res["per_t"].items()])
        print(f"delta_bleu = {res['delta_bleu']:.4f}; wrote {out_dir / 'delta_bleu.jsonl'}")
    else:
        report = combo_probe(ld.model, valid, ld.schedule, g, step=step,
                             sampler_config=SamplerConfig(**{**ld.config.sampler.to_dict(), "b": 1, "length_beams": 1}))
        (out_dir / "combos.jsonl").write_text(report.to_json() + "\n", encoding="utf-8")
        _write_csv(out_dir / "combos.csv", report.csv_rows())
        for key, v in report.combo_bleu.items():
            print(f"{key:>16}  {v:.4f}")
        print(f"wrote {out_dir / 'combos.jsonl'}")
    return 0


def _write_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "series", "value"])
        writer.writerows(rows)


def _eval_one(ckpt, corpus_path, args, scorer):
    ld = load_checkpoint(ckpt)
    sampler = _sampler_from(args, ld.config.sampler)
    _require_scorer(sampler, scorer)
    pairs = read_corpus(corpus_path, ld.vocab, ld.config.denoiser.max_len)
    if not pairs:
        raise UsageError(f"corpus {corpus_path} is empty")
    return ld, evaluate(ld.model, pairs, ld.schedule, sampler, scorer)


def cmd_eval(args) -> int:
    scorer = _load_scorer(args.scorer)
    if args.ablation:
        rows = []
        for item in args.ablation:
            name, _, ckpt = item.partition("=")
            if name not in ABLATIONS or not ckpt:
                raise UsageError(f"--ablation expects NAME=CHECKPOINT with NAME in {ABLATIONS}, got {item!r}")
            scores = {}
            for b in args.b_list or [args.b or 5]:
                for metric in args.mbr_list or [args.mbr or "bleu"]:
                    sub = argparse.Namespace(**{**vars(args), "b": b, "mbr": metric})
                    corpus = args.corpus or _default_valid(ckpt)
                    scores[(metric, b)] = _eval_one(ckpt, corpus, sub, scorer)[1].bleu
            rows.append((name, scores))
        cols = sorted({k for _, s in rows for k in s})
        print("variant".ljust(14) + "".join(f"{m}(b={b})".rjust(18) for m, b in cols))
        for name, scores in rows:
            print(name.ljust(14) + "".join(f"{100 * scores[c]:18.2f}" for c in cols))
        return 0

    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint (or --ablation)")
    corpus = args.corpus or _default_valid(args.checkpoint)
    ld, res = _eval_one(args.checkpoint, corpus, args, scorer)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            for hyp, ref in zip(res.hypotheses, res.references):
                fh.write(json.dumps({"hypothesis": ld.vocab.decode(hyp), "reference": ld.vocab.decode(ref)}) + "\n")
    print(json.dumps({"bleu": res.bleu, "n": len(res.references)}))
    return 0


def cmd_train_scorer(args) -> int:
    from .codec import Vocabulary
    from .denoiser import DenoiserConfig

    run_dir = Path(args.run)
    config = RunConfig.load(run_dir / "config.json")
    vocab = Vocabulary.load(run_dir / "vocab.txt")
    pairs = read_corpus(run_dir / "train.tsv", vocab, config.denoiser.max_len)
    cfg = DenoiserConfig(**{**config.denoiser.to_dict(), "vocab_size": len(vocab)})
    scorer = train_scorer(pairs, cfg, steps=args.steps, seed=args.seed)
    out = Path(args.out) if args.out else run_dir / "scorer.pt"
    torch.save({"format": "trec-scorer", "config": cfg.to_dict(), "tensors": scorer.state_dict()}, out)
    print(f"scorer: {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="trec", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a denoiser")
    t.add_argument("--config", help="JSON config file")
    t.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    t.add_argument("--out", help="output directory (run.out_dir)")
    t.add_argument("--run-id", help="run identifier (run.run_id)")
    t.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    t.add_argument("--resume", metavar="RUN_DIR", help="continue from RUN_DIR/checkpoints/latest.pt")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate candidates and MBR selections")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", help="file with one source per line (TSV corpora accepted)")
    s.add_argument("--source", help="inline space-separated source")
    s.add_argument("--output", help="JSON-lines output (default stdout)")
    _add_sampler_flags(s)
    s.set_defaults(func=cmd_sample)

    pr = sub.add_parser("probe", help="run a diagnostic probe")
    pr.add_argument("--which", required=True, choices=("delta_bleu", "combos", "dynamics"))
    pr.add_argument("--checkpoint")
    pr.add_argument("--valid", help="validation corpus (default: the run's valid.tsv)")
    pr.add_argument("--log", help="metrics.jsonl for the dynamics probe")
    pr.add_argument("--out", default="probe")
    pr.add_argument("--size", type=int, default=200)
    pr.add_argument("--window", type=int, default=100)
    pr.add_argument("--seed", type=int, default=0)
    pr.set_defaults(func=cmd_probe)

    e = sub.add_parser("eval", help="corpus BLEU of selected outputs")
    e.add_argument("--checkpoint")
    e.add_argument("--corpus", help="TSV corpus (default: the run's valid.tsv)")
    e.add_argument("--output", help="per-example JSON-lines")
    e.add_argument("--ablation", nargs="+", metavar="NAME=CHECKPOINT")
    e.add_argument("--b-list", nargs="+", type=int)
    e.add_argument("--mbr-list", nargs="+", choices=("bleu", "perplexity"))
    _add_sampler_flags(e)
    e.set_defaults(func=cmd_eval)

    sc = sub.add_parser("train-scorer", help="train the autoregressive perplexity scorer for a run")
    sc.add_argument("--run", required=True, help="run directory")
    sc.add_argument("--steps", type=int, default=3000)
    sc.add_argument("--seed", type=int, default=0)
    sc.add_argument("--out")
    sc.set_defaults(func=cmd_train_scorer)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"trec: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"trec: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
