"""Experiment CLI: data generation, training, decoding, evaluation and
verification, driven by a JSON config with dotted-key flag overrides.

Subcommands: gen-data, train, finetune, decode, evaluate, verify, report.
``LATALIGN_WORKERS`` overrides the worker count for corpus beam decoding.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import decode_eval, experiments, model, verify
from .core import Vocabulary, read_corpus, write_corpus

DEFAULT_CONFIG = {
    "seed": 0,
    "task": {"vocab_size": 20, "reorder_prob": 0.5, "min_len": 6, "max_len": 10},
    "data": {"n_pairs": 10000, "split": [8000, 1000, 1000], "dir": "data"},
    "model": {"hidden_dim": 32, "upsample_factor": 3},
    "train": {
        "pretrain_objective": "ctc",
        "finetune_objective": "f1",
        "finetune_n": 2,
        "finetune_mode": "ctc",
        "pretrain_steps": 900,
        "finetune_steps": 250,
        "pretrain_lr": 5e-3,
        "finetune_lr": 1e-3,
        "batch_size": 32,
        "adam_betas": [0.9, 0.98],
        "adam_eps": 1e-8,
        "eval_every": 200,
    },
    "beam": {
        "beam_size": 20,
        "alpha_grid": [0.0, 0.1, 0.3],
        "beta_grid": [0.0, 0.5, 1.0],
        "lm_order": 4,
        "lm_k": 0.1,
        "grid_dev_size": 50,
    },
    "paths": {
        "checkpoint": "checkpoints/pretrain.npz",
        "finetuned_checkpoint": "checkpoints/finetune.npz",
        "hyps_dir": "hyps",
        "report": "report.csv",
        "metrics": "metrics.csv",
    },
}


def load_config(path, overrides=()):
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        with open(path, encoding="utf-8") as f:
            user = json.load(f)
        _deep_update(cfg, user)
    for item in overrides:
        key, _, raw = item.partition("=")
        if not _:
            raise SystemExit(f"override must look like key.path=value: {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return cfg


def _deep_update(base, new):
    for k, v in new.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v


def _train_config(cfg) -> model.TrainConfig:
    t = cfg["train"]
    return model.TrainConfig(
        pretrain_objective=t["pretrain_objective"],
        finetune_objective=t["finetune_objective"],
        finetune_n=int(t["finetune_n"]),
        finetune_mode=t["finetune_mode"],
        pretrain_steps=int(t["pretrain_steps"]),
        finetune_steps=int(t["finetune_steps"]),
        pretrain_lr=float(t["pretrain_lr"]),
        finetune_lr=float(t["finetune_lr"]),
        batch_size=int(t["batch_size"]),
        adam_betas=tuple(t["adam_betas"]),
        adam_eps=float(t["adam_eps"]),
        hidden_dim=int(cfg["model"]["hidden_dim"]),
        upsample_factor=int(cfg["model"]["upsample_factor"]),
        seed=int(cfg["seed"]),
        eval_every=int(t.get("eval_every", 200)),
    )


def _data_dir(cfg) -> Path:
    return Path(cfg["data"]["dir"])


def _load_vocabs(cfg):
    d = _data_dir(cfg)
    return (
        Vocabulary.from_file(d / "src_vocab.txt"),
        Vocabulary.from_file(d / "tgt_vocab.txt"),
    )


def _load_split(cfg, split):
    src_vocab, tgt_vocab = _load_vocabs(cfg)
    return read_corpus(_data_dir(cfg) / f"{split}.tsv", src_vocab, tgt_vocab)


def _write_metrics(path, metrics):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    keys = ["phase", "step", "loss"]
    extra = sorted({k for m in metrics for k in m} - set(keys))
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=keys + extra)
        w.writeheader()
        w.writerows(metrics)


def cmd_gen_data(cfg) -> int:
    task_cfg = cfg["task"]
    task = model.make_task(
        int(task_cfg["vocab_size"]),
        float(task_cfg["reorder_prob"]),
        int(cfg["seed"]),
        int(task_cfg["min_len"]),
        int(task_cfg["max_len"]),
    )
    n_pairs = int(cfg["data"]["n_pairs"])
    split = [int(s) for s in cfg["data"]["split"]]
    if sum(split) != n_pairs:
        raise SystemExit("data.split must sum to data.n_pairs")
    pairs = model.generate_synthetic(task, n_pairs, int(cfg["seed"]))
    d = _data_dir(cfg)
    d.mkdir(parents=True, exist_ok=True)
    task.src_vocab.to_file(d / "src_vocab.txt")
    task.tgt_vocab.to_file(d / "tgt_vocab.txt")
    offsets = np.cumsum([0] + split)
    for name, lo, hi in zip(("train", "dev", "test"), offsets[:-1], offsets[1:]):
        write_corpus(d / f"{name}.tsv", pairs[lo:hi], task.src_vocab, task.tgt_vocab)
    print(f"wrote {split} pairs to {d}")
    return 0


def cmd_train(cfg) -> int:
    tcfg = _train_config(cfg)
    tcfg.validate()
    corpus = _load_split(cfg, "train")
    src_vocab, tgt_vocab = _load_vocabs(cfg)
    rng = np.random.default_rng([tcfg.seed, 0])
    params = model.init_params(
        len(src_vocab), tgt_vocab.extended_size, tcfg.hidden_dim,
        tcfg.upsample_factor, rng,
    )
    metrics = model.pretrain(params, corpus, tcfg)
    ckpt = Path(cfg["paths"]["checkpoint"])
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    model.save_checkpoint(ckpt, params, {"train": asdict(tcfg), "phase": "pretrain"})
    _write_metrics(cfg["paths"]["metrics"], metrics)
    print(f"pretrained {tcfg.pretrain_steps} steps; checkpoint at {ckpt}")
    return 0


def cmd_finetune(cfg) -> int:
    tcfg = _train_config(cfg)
    tcfg.validate()
    ckpt_in = Path(cfg["paths"]["checkpoint"])
    if not ckpt_in.exists():
        raise SystemExit(f"pretrain checkpoint not found: {ckpt_in}")
    params, meta = model.load_checkpoint(ckpt_in)
    if meta.get("train", {}).get("pretrain_objective") != tcfg.pretrain_objective:
        raise SystemExit(
            "checkpoint was pretrained with "
            f"{meta.get('train', {}).get('pretrain_objective')!r}, config says "
            f"{tcfg.pretrain_objective!r}"
        )
    corpus = _load_split(cfg, "train")
    metrics = model.finetune(params, corpus, tcfg)
    ckpt_out = Path(cfg["paths"]["finetuned_checkpoint"])
    ckpt_out.parent.mkdir(parents=True, exist_ok=True)
    model.save_checkpoint(ckpt_out, params, {"train": asdict(tcfg), "phase": "finetune"})
    _write_metrics(cfg["paths"]["metrics"], metrics)
    print(f"finetuned {tcfg.finetune_steps} steps; checkpoint at {ckpt_out}")
    return 0


def _load_params(cfg, which):
    key = "finetuned_checkpoint" if which == "finetune" else "checkpoint"
    path = Path(cfg["paths"][key])
    if not path.exists():
        raise SystemExit(f"checkpoint not found: {path}")
    params, _ = model.load_checkpoint(path)
    return params


def _beam_decode_one(args):
    p, lm, beam_cfg = args
    return decode_eval.beam_decode(p, lm, beam_cfg)


def cmd_decode(cfg, which="finetune", split="test", use_beam=False) -> int:
    params = _load_params(cfg, which)
    pairs = _load_split(cfg, split)
    _, tgt_vocab = _load_vocabs(cfg)
    sources = [s for s, _ in pairs]
    ps = experiments.batched_prob_matrices(params, sources)
    out_dir = Path(cfg["paths"]["hyps_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    def write(name, hyps):
        with open(out_dir / name, "w", encoding="utf-8") as f:
            for h in hyps:
                f.write(" ".join(tgt_vocab.words[t] for t in h) + "\n")

    argmax_hyps = [decode_eval.argmax_decode(p, "ctc") for p in ps]
    write(f"{split}.argmax.txt", argmax_hyps)
    if use_beam:
        bcfg = cfg["beam"]
        train_refs = [t for _, t in _load_split(cfg, "train")]
        lm = decode_eval.train_lm(
            train_refs, order=int(bcfg["lm_order"]), k=float(bcfg["lm_k"])
        )
        dev = _load_split(cfg, "dev")[: int(bcfg["grid_dev_size"])]
        dev_ps = experiments.batched_prob_matrices(params, [s for s, _ in dev])
        alpha, beta = decode_eval.grid_search_ab(
            dev_ps, [t for _, t in dev], lm,
            bcfg["alpha_grid"], bcfg["beta_grid"], int(bcfg["beam_size"]),
        )
        beam_cfg = decode_eval.BeamConfig(int(bcfg["beam_size"]), alpha, beta)
        workers = int(os.environ.get("LATALIGN_WORKERS", "1"))
        if workers > 1:
            import multiprocessing

            with multiprocessing.Pool(workers) as pool:
                beam_hyps = pool.map(
                    _beam_decode_one, [(p, lm, beam_cfg) for p in ps]
                )
        else:
            beam_hyps = [decode_eval.beam_decode(p, lm, beam_cfg) for p in ps]
        write(f"{split}.beam.txt", beam_hyps)
        print(f"grid search picked alpha={alpha} beta={beta}")
    print(f"decoded {len(pairs)} sentences from {split}")
    return 0


def cmd_evaluate(cfg, which="finetune", split="test", hyps_file=None) -> int:
    params = _load_params(cfg, which)
    pairs = _load_split(cfg, split)
    _, tgt_vocab = _load_vocabs(cfg)
    refs = [t for _, t in pairs]
    if hyps_file:
        with open(hyps_file, encoding="utf-8") as f:
            hyps = [
                tuple(tgt_vocab.index(w) for w in line.split()) for line in f
            ]
    else:
        ps_all = experiments.batched_prob_matrices(params, [s for s, _ in pairs])
        hyps = [decode_eval.argmax_decode(p, "ctc") for p in ps_all]
    if len(hyps) != len(refs):
        raise SystemExit("hypothesis file size does not match the reference split")
    ps = experiments.batched_prob_matrices(params, [s for s, _ in pairs])
    lm = decode_eval.train_lm([t for _, t in _load_split(cfg, "train")])
    rows = decode_eval.length_bucket_report(hyps, refs, [7, 9])
    summary = {
        "bleu": decode_eval.bleu(hyps, refs),
        "f1_2gram": decode_eval.ngram_f1(hyps, refs, 2),
        "entropy": decode_eval.avg_entropy(ps),
        "ppl": decode_eval.perplexity(lm, [h for h in hyps if h] or [()]),
    }
    report = Path(cfg["paths"]["report"])
    report.parent.mkdir(parents=True, exist_ok=True)
    with open(report, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["bucket", "count", "bleu"])
        for row in rows:
            w.writerow([row["bucket"], row["count"], f"{row['bleu']:.4f}"])
        w.writerow(["entropy", "", f"{summary['entropy']:.6f}"])
        w.writerow(["ppl", "", f"{summary['ppl']:.4f}"])
    for k, v in summary.items():
        print(f"{k}: {v:.4f}")
    print(f"report written to {report}")
    return 0


def cmd_verify(cfg, corrupt_transition=False, json_out=None) -> int:
    results = verify.run_all(corrupt_transition=corrupt_transition)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        extra = f" {r.detail}" if r.detail else ""
        print(f"{status} {r.name} max_err={r.max_err:.3e} n={r.n_checks}{extra}")
        failed += not r.passed
    if json_out:
        with open(json_out, "w", encoding="utf-8") as f:
            json.dump([r.as_dict() for r in results], f, indent=2)
    print(f"{len(results) - failed}/{len(results)} suites passed")
    return 1 if failed else 0


def cmd_report(cfg) -> int:
    report = Path(cfg["paths"]["report"])
    metrics = Path(cfg["paths"]["metrics"])
    if report.exists():
        print(report.read_text(encoding="utf-8"))
    else:
        print("no evaluation report found; run `evaluate` first")
    if metrics.exists():
        with open(metrics, encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        for phase in ("pretrain", "finetune"):
            losses = [float(r["loss"]) for r in rows if r["phase"] == phase]
            if losses:
                print(
                    f"{phase}: {len(losses)} steps, first loss {losses[0]:.4f}, "
                    f"last loss {losses[-1]:.4f}"
                )
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="latalign")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="override a config key, e.g. --set train.pretrain_steps=100",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data")
    sub.add_parser("train")
    sub.add_parser("finetune")
    p_dec = sub.add_parser("decode")
    p_dec.add_argument("--checkpoint", choices=["pretrain", "finetune"], default="finetune")
    p_dec.add_argument("--split", default="test")
    p_dec.add_argument("--beam", action="store_true")
    p_eval = sub.add_parser("evaluate")
    p_eval.add_argument("--checkpoint", choices=["pretrain", "finetune"], default="finetune")
    p_eval.add_argument("--split", default="test")
    p_eval.add_argument("--hyps", help="hypothesis file; defaults to argmax decoding")
    p_ver = sub.add_parser("verify")
    p_ver.add_argument("--json-out")
    p_ver.add_argument(
        "--corrupt-transition", action="store_true",
        help="test-mode mutation hook: perturb the transition matrix",
    )
    sub.add_parser("report")
    args = parser.parse_args(argv)
    cfg = load_config(args.config, args.set)
    if args.command == "gen-data":
        return cmd_gen_data(cfg)
    if args.command == "train":
        return cmd_train(cfg)
    if args.command == "finetune":
        return cmd_finetune(cfg)
    if args.command == "decode":
        return cmd_decode(cfg, args.checkpoint, args.split, args.beam)
    if args.command == "evaluate":
        return cmd_evaluate(cfg, args.checkpoint, args.split, args.hyps)
    if args.command == "verify":
        return cmd_verify(cfg, args.corrupt_transition, args.json_out)
    if args.command == "report":
        return cmd_report(cfg)
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
