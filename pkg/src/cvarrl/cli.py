"""Command-line entry point: ``cvarrl {gen-env,oracle,run,eval,props}``.

Exit status is 0 on success, 2 for bad configuration or input files and 3
when a numerical invariant is violated.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .driver import RunConfig, policy_from_doc, run, write_metrics_csv
from .env_core import load_instance, make_continuous_rewards, make_tabular_lowrank, save_instance, wrap_discretized_policy
from .errors import CvarRLError
from .model_learn import make_model_class
from .plan_exact import cvar_of_policy, enumerate_cvar_oracle
from .properties import SUITES, run_suite
from .risk_math import BudgetGrid

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 2, 3
REGRET_TOL = 1e-9

log = logging.getLogger("cvarrl")


class InvariantViolation(RuntimeError):
    pass


def _grid_for(rewards, H: int, upsilon: float | None) -> BudgetGrid:
    ups = upsilon if upsilon is not None else rewards.upsilon
    if ups is None:
        raise CvarRLError("rewards are off-grid; pass --upsilon")
    return BudgetGrid(ups, H)


def cmd_gen_env(args) -> int:
    rng = np.random.default_rng(args.seed)
    model, rewards = make_tabular_lowrank(args.states, args.actions, args.horizon, rng,
                                          dirichlet_alpha=args.dirichlet_alpha, upsilon=args.upsilon)
    if args.continuous:
        rewards = make_continuous_rewards(args.horizon, args.states, args.actions, rng)
    save_instance(args.out, model, rewards)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    model, rewards = load_instance(args.env)
    grid = _grid_for(rewards, model.horizon, args.upsilon)
    res = enumerate_cvar_oracle(model, rewards, args.tau, grid)
    print(f"cvar_star {res.cvar_star:.10g}")
    print(f"budget {res.best_index * grid.upsilon:.10g} (index {res.best_index})")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = RunConfig.from_json(args.config)
    if args.seed is not None:
        cfg = RunConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    model, rewards = load_instance(args.env)
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 1]))
    model_class = make_model_class(model, cfg.class_size, rng, mix=cfg.mix, include_truth=cfg.include_truth)
    os.makedirs(args.out, exist_ok=True)
    records = []

    def sink(rec):
        records.append(rec)
        log.info("k=%d c_idx=%d regret=%.4g", rec.k, rec.c_k_index, rec.regret_k)

    try:
        result = run(model, rewards, model_class, cfg, sink)
    except Exception:
        write_metrics_csv(os.path.join(args.out, "metrics.csv"), records)
        raise
    result.write(args.out)
    best = result.records[result.best_k - 1]
    print(f"cvar_star {result.cvar_star:.10g}")
    print(f"best k={result.best_k} regret {best.regret_k:.6g}; sampled k={result.sampled_k}")
    print(f"env_samples {result.env_samples}")
    if result.env_samples != cfg.K * model.horizon:
        raise InvariantViolation(f"env samples {result.env_samples} != K*H = {cfg.K * model.horizon}")
    worst = min(r.regret_k for r in result.records)
    if worst < -REGRET_TOL:
        raise InvariantViolation(f"negative regret {worst:.3e}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, rewards = load_instance(args.env)
    with open(args.result, encoding="utf-8") as f:
        doc = json.load(f)
    tau = args.tau if args.tau is not None else doc.get("tau")
    if tau is None:
        raise CvarRLError("pass --tau")
    pdoc = doc["policies"][args.which]
    policy, c1 = policy_from_doc(pdoc)
    value = cvar_of_policy(model, rewards, wrap_discretized_policy(policy, c1), c1, tau)
    print(f"k {pdoc['k']} budget {c1:.10g}")
    print(f"cvar {value:.12g}")
    return EXIT_OK


def cmd_props(args) -> int:
    names = args.suite or list(SUITES)
    failed = 0
    for name in names:
        if name not in SUITES:
            raise CvarRLError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
        trials = args.trials if args.trials is not None else (20 if name == "mle" else 100)
        results = run_suite(name, trials, args.seed)
        n_ok = sum(r.ok for r in results)
        failed += n_ok != trials
        print(f"{'PASS' if n_ok == trials else 'FAIL'} {name}: {n_ok}/{trials}")
    if failed:
        raise InvariantViolation(f"{failed} suite(s) failed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cvarrl", description="Risk-sensitive RL in low-rank MDPs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-env", help="write a random tabular instance as JSON")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--states", type=int, default=3)
    g.add_argument("--actions", type=int, default=2)
    g.add_argument("--horizon", type=int, default=3)
    g.add_argument("--upsilon", type=float, default=0.1)
    g.add_argument("--dirichlet-alpha", type=float, default=1.0)
    g.add_argument("--continuous", action="store_true", help="off-grid reward support")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_env)

    o = sub.add_parser("oracle", help="exact optimal CVaR and budget")
    o.add_argument("--env", required=True)
    o.add_argument("--tau", type=float, required=True)
    o.add_argument("--upsilon", type=float)
    o.set_defaults(func=cmd_oracle)

    r = sub.add_parser("run", help="run ELA or ELLA from a JSON config")
    r.add_argument("--config", required=True)
    r.add_argument("--env", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int)
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="exact CVaR of a stored policy")
    e.add_argument("--env", required=True)
    e.add_argument("--result", required=True, help="result.json written by run")
    e.add_argument("--which", choices=("sampled", "best", "last"), default="last")
    e.add_argument("--tau", type=float)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("props", help="run the property suites")
    s.add_argument("--suite", action="append", help=f"one of {sorted(SUITES)}; repeatable")
    s.add_argument("--trials", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_props)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except InvariantViolation as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (CvarRLError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
