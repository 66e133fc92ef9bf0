"""Command-line entry point: ``ratlab {gen-data,train,eval,attack-eval,compare}``.

Flags override values from ``--config``. Results go to stdout as JSON lines
or tab-separated tables; failures print one JSON error record to stderr and
exit with status 1.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

from .adversarial import INITS, METHODS, NORMS, PerturbConfig
from .harness import REGIMES, TASKS, TRAIN_METHODS, ConfigError, RunConfig, cmd_attack_eval, cmd_compare, cmd_eval, cmd_gen_data, error_record, run_train

# flag dest -> RunConfig field
_OVERRIDES = {
    "task": "task",
    "method": "method",
    "regime": "regime",
    "rat_p": "p_attack",
    "epsilon": "epsilon",
    "steps": "steps",
    "step_size": "step_size",
    "norm": "norm",
    "alpha_reg": "alpha_reg",
    "init": "init",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "lr": "lr",
    "momentum": "momentum",
    "clip_norm": "clip_norm",
    "dim": "dim",
    "hidden": "hidden",
    "seed_init": "seed_init",
    "seed_data": "seed_data",
    "seed_gate": "seed_gate",
    "out": "out",
}


def _load_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _add_attack_flags(p: argparse.ArgumentParser, methods) -> None:
    p.add_argument("--method", choices=methods)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--step-size", type=float)
    p.add_argument("--norm", choices=NORMS)
    p.add_argument("--alpha-reg", type=float)
    p.add_argument("--init", choices=INITS)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags override it")
    p.add_argument("--task", choices=TASKS)
    _add_attack_flags(p, TRAIN_METHODS)
    p.add_argument("--regime", choices=REGIMES)
    p.add_argument("--rat-p", type=float, help="attack probability per batch")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--clip-norm", type=float, help="gradient norm cap; 0 turns clipping off")
    p.add_argument("--dim", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--seed-init", type=int)
    p.add_argument("--seed-data", type=int)
    p.add_argument("--seed-gate", type=int)
    p.add_argument("--data-spec", help="JSON synthetic corpus spec")
    p.add_argument("--train-file")
    p.add_argument("--dev-file")
    p.add_argument("--test-file")
    p.add_argument("--out")
    p.add_argument("--no-plots", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ratlab", description="Random adversarial training experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic corpus")
    g.add_argument("--task", choices=TASKS, default="ner")
    g.add_argument("--config", help="JSON synthetic corpus spec")
    g.add_argument("--out", required=True)

    _add_run_flags(sub.add_parser("train", help="train one model"))

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True, help="checkpoint.npz or its run directory")
    e.add_argument("--split", default="test")

    a = sub.add_parser("attack-eval", help="clean vs attacked metrics for a checkpoint")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--split", default="test")
    _add_attack_flags(a, METHODS)
    a.add_argument("--epsilons", type=float, nargs="+", help="sweep these budgets")
    a.add_argument("--seed-init", type=int, default=0, help="seed for random attack initialisation")
    a.add_argument("--out")
    a.add_argument("--no-plots", action="store_true")

    c = sub.add_parser("compare", help="run a method x regime x seed grid")
    _add_run_flags(c)
    c.add_argument("--methods", nargs="+", choices=METHODS, default=list(METHODS))
    c.add_argument("--regimes", nargs="+", choices=REGIMES, default=list(REGIMES))
    c.add_argument("--tasks", nargs="+", choices=TASKS)
    c.add_argument("--seeds", type=int, default=5, help="number of seeds (0..n-1)")
    c.add_argument("--table-steps", type=int, help="numeric S in the cost table instead of symbolic")
    return ap


def run_config_from_args(args) -> RunConfig:
    d = _load_json(args.config) if args.config else {}
    d.pop("config_hash", None)
    for flag, key in _OVERRIDES.items():
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    if d.get("clip_norm") == 0:
        d["clip_norm"] = None
    if args.data_spec and args.train_file:
        raise ConfigError("--data-spec and --train-file are mutually exclusive")
    if args.data_spec:
        d["data"] = {"synthetic": _load_json(args.data_spec)}
    elif args.train_file:
        files = {"train": args.train_file}
        if args.dev_file:
            files["dev"] = args.dev_file
        if args.test_file:
            files["test"] = args.test_file
        d["data"] = {"files": files}
    return RunConfig.from_dict(d)


def _attack_config(args) -> PerturbConfig:
    method = args.method or "fgm"
    return PerturbConfig(
        method,
        0.3 if args.epsilon is None else args.epsilon,
        args.steps or (1 if method in ("fgsm", "fgm") else 3),
        args.step_size,
        args.norm or "l2",
        1.0 if args.alpha_reg is None else args.alpha_reg,
        init=args.init,
    )


def _print_tsv(rows, out=sys.stdout) -> None:
    csv.writer(out, delimiter="\t", lineterminator="\n").writerows(rows)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def dispatch(args) -> None:
    if args.command == "gen-data":
        spec = _load_json(args.config) if args.config else {}
        _emit(cmd_gen_data(spec, args.task, args.out))
    elif args.command == "train":
        cfg = run_config_from_args(args)
        rep = run_train(cfg, plots=not args.no_plots).report
        _emit({k: rep[k] for k in ("config_hash", "task", "regime", "method", "test", "events", "ledger")})
    elif args.command == "eval":
        _emit(cmd_eval(args.checkpoint, args.split))
    elif args.command == "attack-eval":
        res = cmd_attack_eval(args.checkpoint, _attack_config(args), args.split, args.epsilons, args.seed_init, args.out, not args.no_plots)
        _emit(res)
    elif args.command == "compare":
        base = run_config_from_args(args)
        tasks = args.tasks or [base.task]
        res = cmd_compare(base, args.methods, args.regimes, tasks, range(args.seeds), args.out, not args.no_plots, args.table_steps)
        _print_tsv(res["performance"])
        print()
        _print_tsv(res["cost"])
        failed = [r for r in res["records"] if r["status"] != "ok"]
        if failed:
            print(f"{len(failed)} run(s) failed; see runs.jsonl", file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        dispatch(args)
    except Exception as e:  # noqa: BLE001 - every failure becomes a structured record
        print(json.dumps(error_record(e, args.command), sort_keys=True), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
