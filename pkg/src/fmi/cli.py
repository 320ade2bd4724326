"""Command line entry point: ``fmi <command> ...``.

Exit codes: 0 success, 1 configuration or input error, 2 some runs failed.
"""

import argparse
import csv
import logging
import sys

from . import harness
from .datagen import EXAMPLE2_ENVIRONMENTS, DatasetFormatError, generate, load_dataset, save_dataset
from .models import CheckpointError, load_model, save_model
from .numerics import derive_seed, make_rng
from .stats import EmptyCellError, ExpectedCellError, decide_workflow, gof_report
from .training import train_erm, train_fmi

OK, CONFIG_ERROR, PARTIAL_FAILURE = 0, 1, 2


def _env_by_id(cfg, env_id):
    for e in cfg.envs:
        if e.id == env_id:
            return e
    raise harness.ConfigError(f"no environment {env_id!r} in config")


def cmd_gen(args):
    params = {}
    for item in args.param or []:
        k, _, v = item.partition("=")
        params[k] = harness._literal(v)
    # the environment id doubles as the named setting when no parameter is given
    if args.family.startswith("example2") and "p_e" not in params and args.env in EXAMPLE2_ENVIRONMENTS:
        params["name"] = args.env
    if args.family.startswith("cmnist") and "e" not in params:
        try:
            params["e"] = float(args.env)
        except ValueError:
            raise harness.ConfigError(f"--env must be a color flip probability for {args.family}") from None
    env = harness.EnvConfig(args.env, "train", args.family, args.n, params, args.intervention)
    ds = generate(env.spec(), args.n, make_rng(args.seed))
    save_dataset(ds, args.out)
    return OK


def cmd_train(args):
    cfg = harness.load_config(args.config)
    seed = derive_seed(derive_seed(cfg.seed, args.repeat), harness._METHOD, harness.METHODS.index(args.method))
    if args.method == "oracle":
        env = cfg.test_envs[0] if args.env is None else _env_by_id(cfg, args.env)
        seed = derive_seed(seed, harness._key(env.id))
        train = harness.draw(cfg, args.repeat, harness._ORACLE, env)
    else:
        sets = [harness.draw(cfg, args.repeat, harness._TRAIN, e) for e in cfg.train_envs]
        train = harness.concat(sets, "train")
    trace = None
    if args.method == "fmi":
        model, _, trace = train_fmi(train, cfg.fmi_config(seed))
    else:
        e = cfg.erm
        model = train_erm(train, e.steps, e.lr, cfg.hidden, make_rng(seed), e.batch_size, e.momentum)
    save_model(model, args.out)
    if args.trace:
        with open(args.trace, "w", newline="") as fh:
            w = csv.DictWriter(fh, ("step", "sub_risk", "main_risk", "emitted"), lineterminator="\n")
            w.writeheader()
            if trace is not None:
                w.writerows(trace.rows())
    return OK


def cmd_gof(args):
    model = load_model(args.model)
    train, valid = load_dataset(args.train), load_dataset(args.valid)
    rng = make_rng(args.seed)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("repeat", "class", "statistic", "df", "p_value", "decision"))
        for r in range(args.repeats):
            rep = gof_report(model, train, valid, args.n, rng)
            decision = decide_workflow(rep)
            for e in rep.entries:
                w.writerow((r, e.k, repr(e.statistic), e.df, repr(e.p_value), decision))
    return OK


def cmd_run(args):
    cfg = harness.load_config(args.config)
    report = harness.run_experiment(cfg, jobs=args.jobs)
    harness.write_outputs(report, args.out_dir)
    sys.stdout.write(harness.render(report, "md"))
    return PARTIAL_FAILURE if report.failures else OK


def cmd_report(args):
    path = args.input
    if not path.endswith(".json"):
        path = f"{path.rstrip('/')}/report.json"
    report = harness.load_report(path)
    sys.stdout.write(harness.render(report, args.format))
    return OK


def cmd_pvals(args):
    cfg = harness.load_config(args.config)
    rows = harness.pvalue_series(cfg)
    with open(args.out, "w", newline="") as fh:
        fh.write(harness.pvalue_csv(rows))
    return OK


def build_parser():
    p = argparse.ArgumentParser(prog="fmi", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a dataset file")
    g.add_argument("--family", required=True, choices=("example2", "example2s", "cmnist-syn", "cmnist-idx"))
    g.add_argument("--env", required=True, help="environment id, e.g. E0")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--param", action="append", help="generator parameter key=value (repeatable)")
    g.add_argument("--intervention", default="none", choices=harness.INTERVENTIONS)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one method on a config's training data")
    t.add_argument("--method", required=True, choices=harness.METHODS)
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--trace", help="per-step CSV (FMI only has risks)")
    t.add_argument("--repeat", type=int, default=0)
    t.add_argument("--env", help="test environment for the oracle")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("gof", help="goodness-of-fit test of a model's feature")
    s.add_argument("--model", required=True)
    s.add_argument("--train", required=True)
    s.add_argument("--valid", required=True)
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--repeats", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gof)

    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("--config", required=True)
    r.add_argument("--out-dir", required=True)
    r.add_argument("--jobs", type=int, default=1)
    r.set_defaults(func=cmd_run)

    o = sub.add_parser("report", help="render a finished run")
    o.add_argument("--in", dest="input", required=True, help="run directory or report.json")
    o.add_argument("--format", default="md", choices=("md", "csv", "json"))
    o.set_defaults(func=cmd_report)

    v = sub.add_parser("pvals", help="p-values along training")
    v.add_argument("--config", required=True)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_pvals)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (harness.ConfigError, DatasetFormatError, CheckpointError, EmptyCellError, ExpectedCellError,
            OSError, TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
