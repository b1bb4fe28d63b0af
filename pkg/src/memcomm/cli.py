"""``memcomm`` command line: training, sweeps, mask comparisons and symbol accounting.

CSV goes to ``--out`` (with a PNG figure and, for evaluation runs, a JSON
manifest beside it) or to stdout when ``--out`` is omitted.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import adaptive
from . import channel as ch
from . import checkpoint as ckpt
from . import data as D
from . import harness as H
from . import plotting
from .codec import encode_sentences, jsc_encode_graph
from .training import noise_from_ensemble


def _emit_dicts(rows: list[dict], header: list[str], out: str | None) -> None:
    if out is None:
        w = csv.DictWriter(sys.stdout, fieldnames=header, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        return
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=header)
        w.writeheader()
        w.writerows(rows)


def _emit_results(rows, cfg: H.ExperimentConfig, command: str, out: str | None, plot: bool) -> None:
    hashes = {role: ckpt.file_hash(p) for role, p in cfg.checkpoints.items() if Path(p).exists()}
    if out is None:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=H.RESULT_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(r.as_csv() for r in rows)
        sys.stdout.write(buf.getvalue())
        return
    path = H.write_rows(rows, out, H.run_manifest(cfg, command, hashes))
    if plot:
        plotting.plot_accuracy_rows(rows, path, title=f"{command}: {cfg.channel}")
    print(f"wrote {len(rows)} rows to {path}", file=sys.stderr)


def cmd_train(args) -> int:
    cfg = H.ExperimentConfig.load(args.config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.txt"
    log_path.write_text("", encoding="utf-8")
    t0 = time.time()
    res = H.run_training(cfg, out_dir, args.stages, log_path)
    for rec in res["log"].records:
        print(rec.line(), file=sys.stderr)
    manifest = {"config": cfg.to_dict(), "config_hash": cfg.digest(), "checkpoints": res["hashes"],
                "seconds": round(time.time() - t0, 1)}
    (out_dir / "train_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    rows = [{"role": k, "path": str(out_dir / f"{k}.ckpt"), "sha256": v} for k, v in res["hashes"].items()]
    _emit_dicts(rows, ["role", "path", "sha256"], None)
    return 0


def cmd_eval_sweep(args) -> int:
    cfg = H.ExperimentConfig.load(args.config)
    _emit_results(H.run_accuracy_sweep(cfg), cfg, "eval-sweep", args.out, not args.no_plot)
    return 0


def cmd_mask_compare(args) -> int:
    cfg = H.ExperimentConfig.load(args.config)
    _emit_results(H.run_mask_comparison(cfg), cfg, "mask-compare", args.out, not args.no_plot)
    return 0


def _link_budget(args) -> adaptive.LinkBudget:
    return adaptive.LinkBudget(args.length, args.peak_power, args.model_noise, 0.0, args.max_length)


def cmd_symbol_table(args) -> int:
    snrs = args.snr or list(H.COARSE_SNRS)
    rows = H.symbol_table(snrs, _link_budget(args), args.fixed, args.coded_bits)
    header = ["method"] + [f"{s:g}" for s in snrs]
    flat = [{"method": r["method"], **{f"{s:g}": r[s] for s in snrs}} for r in rows]
    _emit_dicts(flat, header, args.out)
    if args.out and not args.no_plot:
        plotting.plot_symbol_table(rows, snrs, args.out)
    return 0


def cmd_plan(args) -> int:
    snrs = args.snr or list(H.COARSE_SNRS)
    rows = H.plan_rows(snrs, _link_budget(args))
    flat = [{**r, "real_length": f"{r['real_length']:.4f}", "noise_var": f"{r['noise_var']:.6g}"} for r in rows]
    _emit_dicts(flat, ["snr_db", "noise_var", "real_length", "planned_length"], args.out)
    if args.out and not args.no_plot:
        plotting.plot_plan(rows, args.out)
    return 0


def cmd_noise_estimate(args) -> int:
    if len(args.checkpoints) < 2:
        raise ValueError("noise-estimate needs at least two checkpoints")
    models = [H.load_model(p) for p in args.checkpoints]
    if len({m.codec.symbols for m in models}) != 1:
        raise ValueError("checkpoints must share the transmit length")
    cfg = H.ExperimentConfig.load(args.config) if args.config else H.ExperimentConfig()
    probes = []
    for ep in H.load_episodes(cfg):
        for sent in ep.context + [ep.question]:
            if sent not in probes:
                probes.append(sent)
        if len(probes) >= args.probes:
            break
    probes = probes[:args.probes]
    stack = []
    for m in models:
        ids = [m.vocab.encode(s) for s in probes]
        tokens = np.zeros((len(ids), max(map(len, ids))), dtype=np.int64)
        for i, row in enumerate(ids):
            tokens[i, :len(row)] = row
        x = jsc_encode_graph(m.params, m.codec, encode_sentences(m.params, m.codec, tokens)).value
        stack.append(ch.pairs_to_complex(x))
    est = noise_from_ensemble(np.stack(stack))
    row = {"models": len(models), "probes": len(probes), "mu_max": f"{est.peak:.6f}",
           "peak_power": f"{est.peak_power:.6f}", "sigma_m2": f"{est.variance:.6f}"}
    _emit_dicts([row], list(row), args.out)
    return 0


def cmd_data_inspect(args) -> int:
    cfg = H.ExperimentConfig.load(args.config) if args.config else H.ExperimentConfig()
    if args.dataset:
        cfg.dataset = args.dataset
    episodes = H.load_episodes(cfg)
    tr, va, te = D.split(episodes, cfg.data_seed)
    vocab = D.build_vocab(tr)
    sentences = {tuple(s) for ep in episodes for s in ep.context + [ep.question]}
    stats = {
        "episodes": len(episodes), "train": len(tr), "validation": len(va), "test": len(te),
        "vocab_size": vocab.size, "answers": vocab.n_answers,
        "distinct_sentences": len(sentences), "max_sentence_tokens": max(map(len, sentences)),
        "max_context": max(len(ep.context) for ep in episodes),
        "mean_context": f"{np.mean([len(ep.context) for ep in episodes]):.3f}",
        "unknown_eval_tokens": sum(t not in vocab.tokens for ep in va + te for s in ep.context + [ep.question]
                                   for t in s),
    }
    _emit_dicts([{"key": k, "value": v} for k, v in stats.items()], ["key", "value"], args.out)
    return 0


def cmd_make_data(args) -> int:
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    path = D.write_task1(args.out, args.stories, args.seed)
    print(f"wrote {args.stories} stories to {path}", file=sys.stderr)
    return 0


def _budget_args(p) -> None:
    p.add_argument("--length", type=int, default=16, help="base length L (model noise only)")
    p.add_argument("--peak-power", type=float, default=1.0)
    p.add_argument("--model-noise", type=float, default=1.44)
    p.add_argument("--max-length", type=int, default=32)
    p.add_argument("--snr", type=float, nargs="+", help="SNR grid in dB")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="memcomm", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run training stages and write checkpoints")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--stages", nargs="+", choices=["semantic", "jsc", "whole", "importance", "consecutive"])
    p.set_defaults(func=cmd_train)

    for name, func, text in (("eval-sweep", cmd_eval_sweep, "accuracy over the SNR x seed grid"),
                             ("mask-compare", cmd_mask_compare, "mask strategies across budgets and SNRs")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True)
        p.add_argument("--out")
        p.add_argument("--no-plot", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("symbol-table", help="symbols per sentence by method and SNR")
    _budget_args(p)
    p.add_argument("--fixed", type=int, default=32)
    p.add_argument("--coded-bits", type=int, default=H.BASELINE_CODED_BITS)
    p.add_argument("--out")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_symbol_table)

    p = sub.add_parser("plan", help="planned transmit length per SNR")
    _budget_args(p)
    p.add_argument("--out")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("noise-estimate", help="model-noise statistics from several checkpoints")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--config")
    p.add_argument("--probes", type=int, default=200)
    p.add_argument("--out")
    p.set_defaults(func=cmd_noise_estimate)

    p = sub.add_parser("data-inspect", help="corpus and split statistics")
    p.add_argument("--config")
    p.add_argument("--dataset")
    p.add_argument("--out")
    p.set_defaults(func=cmd_data_inspect)

    p = sub.add_parser("make-data", help="write generated task-1 stories in release format")
    p.add_argument("--out", required=True)
    p.add_argument("--stories", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_data)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (H.ConfigError, ckpt.CheckpointError, D.FormatError, FileNotFoundError, ValueError,
            ch.ChannelError) as err:
        print(f"memcomm {args.command}: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
