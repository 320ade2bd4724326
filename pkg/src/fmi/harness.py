"""Experiment orchestration: configs, seeded repeats, model selection, reports.

A config is an INI file::

    [experiment]
    schema = 1
    id = table1_example2
    methods = fmi, erm, oracle
    repeats = 10
    seed = 0
    selection = last            ; or training_domain_validation, test_domain_validation
    checkpoint_every = 500
    metric = error              ; or accuracy (markdown tables only)

    [env:E0]
    role = train                ; train, test or valid
    family = example2
    name = E0                   ; any other key is passed to the generator
    n = 1000

    [model]
    hidden = 32                 ; comma separated widths, empty for linear

    [fmi]
    strategy = together
    steps = 10000
    ...

    [erm]                       ; also used by the oracle
    steps = 10000
    lr = 0.1

Every random stream is derived from ``(seed, repeat, purpose, ...)`` so results
do not depend on method order, on which methods run, or on scheduling.
"""

import ast
import configparser
import csv
import hashlib
import io
import json
import logging
import math
import os
import time
import zlib
from importlib import metadata
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .datagen import Example2Params, concat, generate, shuffled_background
from .models import evaluate
from .numerics import derive_rng, derive_seed
from .scm import NO_INTERVENTION, SPU, EnvironmentSpec, Intervention, SCMSpec
from .stats import decide_workflow, gof_report
from .training import FmiConfig, train_erm, train_fmi

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METHODS = ("fmi", "erm", "oracle")
SELECTION_RULES = ("last", "training_domain_validation", "test_domain_validation")
ROLES = ("train", "test", "valid")
INTERVENTIONS = ("none", "shuffled_background", "color_free")
HOLDOUT = 0.2

# stream ids for derive_seed; fixed so adding a stream never shifts another
_TRAIN, _TEST, _PICK, _ORACLE, _VALID, _GOF, _FRESH, _METHOD, _SPLIT = range(9)

CSV_FIELDS = ("method", "env", "repeat", "seed", "error", "accuracy", "step", "status", "message")
GOF_FIELDS = ("repeat", "feature", "env", "class", "statistic", "df", "p_value", "n", "short", "decision")
PVAL_FIELDS = ("repeat", "step", "feature", "env", "class", "statistic", "p_value", "n")


class ConfigError(ValueError):
    pass


def _version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _key(name):
    return zlib.crc32(name.encode())


def _literal(text):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


# --------------------------------------------------------------------- config


@dataclass
class EnvConfig:
    id: str
    role: str
    family: str
    n: int
    params: dict = field(default_factory=dict)
    intervention: str = "none"

    def spec(self):
        params = dict(self.params)
        scm = None
        if self.family == "scm":
            m, o = int(params.pop("m")), int(params.pop("o"))
            w = np.asarray(params.pop("w_true", np.ones(m)), dtype=float)
            scm = SCMSpec(m, o, w / np.linalg.norm(w), q=float(params.pop("q", 0.0)),
                          graph_kind=params.pop("graph_kind", "FIIF"))
        return EnvironmentSpec(self.id, self.family, params, self._intervention(), scm)

    def _intervention(self):
        if self.intervention == "none":
            return NO_INTERVENTION
        if self.intervention == "shuffled_background":
            if self.family not in ("example2", "example2s"):
                raise ConfigError(f"env {self.id}: shuffled_background needs an example2 family")
            keep = {k: v for k, v in self.params.items() if k in ("nu_background",)}
            return shuffled_background(Example2Params(0.5, 0.5, **keep))
        # color drawn independently of the label
        return Intervention(target=SPU, kind="stochastic", params={"family": "bernoulli_sign", "p": 0.5})


@dataclass
class TrainConfig:
    steps: int = 5000
    lr: float = 0.01
    momentum: float = 0.0
    batch_size: int = 64


@dataclass
class ExperimentConfig:
    id: str
    envs: list
    methods: tuple = METHODS
    repeats: int = 10
    seed: int = 0
    selection: str = "last"
    checkpoint_every: int = 500
    metric: str = "error"
    gof_n: int = 200
    hidden: tuple = ()
    fmi: dict = field(default_factory=dict)
    erm: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        self.methods = tuple(self.methods)
        self.hidden = tuple(self.hidden)
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ConfigError(f"methods must be a non-empty subset of {METHODS}, got {self.methods}")
        if self.selection not in SELECTION_RULES:
            raise ConfigError(f"unknown selection rule {self.selection!r}")
        if self.metric not in ("error", "accuracy"):
            raise ConfigError(f"unknown metric {self.metric!r}")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if not self.train_envs:
            raise ConfigError("need at least one train environment")
        if not self.test_envs:
            raise ConfigError("need at least one test environment")
        ids = [e.id for e in self.envs]
        if len(set(ids)) != len(ids):
            raise ConfigError("environment ids must be unique")
        for e in self.envs:
            if e.role not in ROLES:
                raise ConfigError(f"env {e.id}: unknown role {e.role!r}")
            if e.intervention not in INTERVENTIONS:
                raise ConfigError(f"env {e.id}: unknown intervention {e.intervention!r}")
            if e.n < 1:
                raise ConfigError(f"env {e.id}: n must be >= 1")
        try:
            self.fmi_config(0)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[fmi]: {exc}") from None

    @property
    def train_envs(self):
        return [e for e in self.envs if e.role == "train"]

    @property
    def test_envs(self):
        return [e for e in self.envs if e.role == "test"]

    @property
    def valid_envs(self):
        return [e for e in self.envs if e.role == "valid"]

    def fmi_config(self, seed):
        kw = dict(self.fmi)
        lr = kw.pop("lr", None)
        if lr is not None:
            kw.setdefault("sub_lr", lr)
            kw.setdefault("main_lr", lr)
        return FmiConfig(hidden=self.hidden, seed=seed, **kw)

    def to_dict(self):
        d = asdict(self)
        d["methods"] = list(self.methods)
        d["hidden"] = list(self.hidden)
        return d

    @property
    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=repr).encode()
        return hashlib.sha256(blob).hexdigest()


def _ints(text):
    return tuple(int(v) for v in text.replace(",", " ").split())


def parse_config(text):
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    if not cp.has_section("experiment"):
        raise ConfigError("missing [experiment] section")
    ex = cp["experiment"]
    schema = ex.getint("schema", SCHEMA_VERSION)
    if schema != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema version {schema}")

    envs = []
    for name in cp.sections():
        if not name.startswith("env:"):
            continue
        sec = dict(cp[name])
        try:
            role, family, n = sec.pop("role"), sec.pop("family"), int(sec.pop("n"))
        except KeyError as exc:
            raise ConfigError(f"[{name}] missing key {exc}") from None
        intervention = sec.pop("intervention", "none")
        envs.append(EnvConfig(name[4:], role, family, n, {k: _literal(v) for k, v in sec.items()}, intervention))

    fmi = {}
    if cp.has_section("fmi"):
        for k, v in cp["fmi"].items():
            fmi[k] = _literal(v)
    erm = TrainConfig()
    if cp.has_section("erm"):
        s = cp["erm"]
        erm = TrainConfig(s.getint("steps", erm.steps), s.getfloat("lr", erm.lr),
                          s.getfloat("momentum", erm.momentum), s.getint("batch_size", erm.batch_size))
    hidden = _ints(cp.get("model", "hidden", fallback=""))
    try:
        return ExperimentConfig(
            id=ex.get("id", "experiment"),
            envs=envs,
            methods=tuple(m.strip() for m in ex.get("methods", ",".join(METHODS)).split(",") if m.strip()),
            repeats=ex.getint("repeats", 10),
            seed=ex.getint("seed", 0),
            selection=ex.get("selection", "last"),
            checkpoint_every=ex.getint("checkpoint_every", 500),
            metric=ex.get("metric", "error"),
            gof_n=ex.getint("gof_n", 200),
            hidden=hidden,
            fmi=fmi,
            erm=erm,
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def load_config(path, environ=None):
    """Parse ``path``; ``FMI_SEED`` in ``environ`` overrides the master seed."""
    try:
        with open(path) as fh:
            cfg = parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    environ = os.environ if environ is None else environ
    if environ.get("FMI_SEED"):
        try:
            cfg.seed = int(environ["FMI_SEED"])
        except ValueError:
            raise ConfigError(f"FMI_SEED must be an integer, got {environ['FMI_SEED']!r}") from None
    return cfg


# ----------------------------------------------------------------------- data


@dataclass
class RepeatData:
    seed: int
    train: dict  # env id -> dataset
    test: dict
    pick: dict  # test-domain selection draws (n/5 rows)
    oracle: dict  # fresh test-environment draws the oracle is fitted on
    valid: dict


def draw(cfg, r, purpose, env, n=None):
    """One environment's dataset for repeat ``r`` and stream ``purpose``."""
    seed = derive_seed(cfg.seed, r)
    return generate(env.spec(), n or env.n, derive_rng(seed, purpose, _key(env.id)))


def repeat_data(cfg, r):
    def get(purpose, env, n=None):
        return draw(cfg, r, purpose, env, n)

    return RepeatData(
        derive_seed(cfg.seed, r),
        {e.id: get(_TRAIN, e) for e in cfg.train_envs},
        {e.id: get(_TEST, e) for e in cfg.test_envs},
        {e.id: get(_PICK, e, max(1, round(HOLDOUT * e.n))) for e in cfg.test_envs},
        {e.id: get(_ORACLE, e) for e in cfg.test_envs} if "oracle" in cfg.methods else {},
        {e.id: get(_VALID, e) for e in cfg.valid_envs},
    )


def _split(datasets, seed):
    rest, held = [], []
    for name, ds in datasets.items():
        a, b = ds.split(HOLDOUT, derive_rng(seed, _SPLIT, _key(name)))
        rest.append(a)
        held.append(b)
    return concat(rest, "train"), concat(held, "holdout")


# ------------------------------------------------------------------- training


def _fit(cfg, method, fit_sets, seed):
    """Train once; return [(step, model)] checkpoints, last one final."""
    every = cfg.checkpoint_every
    train = concat(list(fit_sets.values()), "train")
    snaps = []
    if method == "fmi":
        fcfg = cfg.fmi_config(seed)
        main, _, _ = train_fmi(train, fcfg, every, lambda step, m, s: snaps.append((step, m)))
        steps = fcfg.steps
        final = main
    else:
        e = cfg.erm
        final = train_erm(train, e.steps, e.lr, cfg.hidden, derive_rng(seed), e.batch_size, e.momentum,
                          every, lambda step, m: snaps.append((step, m)))
        steps = e.steps
    if not snaps or snaps[-1][0] != steps:
        snaps.append((steps, final))
    return snaps


def _best(snaps, ds):
    # highest accuracy on ds; the earliest checkpoint wins ties
    errors = [evaluate(m, ds) for _, m in snaps]
    i = int(np.argmin(errors))
    return snaps[i]


def _select(cfg, snaps, holdout, pick):
    if cfg.selection == "last":
        return snaps[-1]
    if cfg.selection == "training_domain_validation":
        return _best(snaps, holdout)
    return _best(snaps, pick)


def _row(method, env, r, seed, step=None, err=None, status="ok", message=""):
    return {
        "method": method,
        "env": env,
        "repeat": r,
        "seed": seed,
        "error": err,
        "accuracy": None if err is None else 1.0 - err,
        "step": step,
        "status": status,
        "message": message,
    }


def _run_method(cfg, method, data, r):
    """Rows for one (repeat, method), plus the final models used for GOF."""
    seed = derive_seed(data.seed, _METHOD, METHODS.index(method))
    rows, finals = [], {}
    if method == "oracle":
        for env in cfg.test_envs:
            s = derive_seed(seed, _key(env.id))
            fit = {env.id: data.oracle[env.id]}
            holdout = None
            if cfg.selection == "training_domain_validation":
                rest, holdout = _split(fit, s)
                fit = {env.id: rest}
            snaps = _fit(cfg, method, fit, s)
            step, model = _select(cfg, snaps, holdout, data.pick[env.id])
            rows.append(_row(method, env.id, r, s, step, evaluate(model, data.test[env.id])))
        return rows, finals

    fit, holdout = data.train, None
    if cfg.selection == "training_domain_validation":
        rest, holdout = _split(data.train, seed)
        fit = {"train": rest}
    snaps = _fit(cfg, method, fit, seed)
    finals[method] = snaps[-1][1]
    for env in cfg.test_envs:
        step, model = _select(cfg, snaps, holdout, data.pick[env.id])
        rows.append(_row(method, env.id, r, seed, step, evaluate(model, data.test[env.id])))
    return rows, finals


def _gof_rows(cfg, data, r, finals):
    rows = []
    if not data.valid:
        return rows
    train = concat(list(data.train.values()), "train")
    for method in ("erm", "fmi"):
        if method not in finals:
            continue
        for env_id, valid in data.valid.items():
            rng = derive_rng(data.seed, _GOF, _key(env_id), METHODS.index(method))
            rep = gof_report(finals[method], train, valid, cfg.gof_n, rng)
            decision = decide_workflow(rep) if rep.entries else ""
            for e in rep.entries:
                rows.append({
                    "repeat": r, "feature": method, "env": env_id, "class": e.k,
                    "statistic": e.statistic, "df": e.df, "p_value": e.p_value,
                    "n": e.n, "short": e.short, "decision": decision,
                })
    return rows


def _task(cfg, r, method):
    try:
        data = repeat_data(cfg, r)
        rows, finals = _run_method(cfg, method, data, r)
        return rows, _gof_rows(cfg, data, r, finals)
    except Exception as exc:  # recorded, siblings keep running
        log.exception("repeat %d, method %s failed", r, method)
        msg = f"{type(exc).__name__}: {exc}"
        return [_row(method, e.id, r, None, status="failed", message=msg) for e in cfg.test_envs], []


# -------------------------------------------------------------------- reports


@dataclass
class RunReport:
    experiment: str
    config_hash: str
    master_seed: int
    metric: str
    methods: list
    envs: list
    repeats: int
    rows: list = field(default_factory=list)
    gof: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    @property
    def failures(self):
        return sum(r["status"] != "ok" for r in self.rows)

    @property
    def flags(self):
        out = []
        if self.repeats == 1:
            out.append("single_repeat: std reported as 0")
        if self.failures:
            out.append(f"excluded_runs: {self.failures}")
        return out

    def values(self, method, env, metric=None):
        key = metric or self.metric
        return [r[key] for r in self.rows if r["method"] == method and r["env"] == env and r["status"] == "ok"]

    def aggregates(self, metric=None):
        """{method: {env: {mean, std, count, excluded}}}, plus an ``Avg`` column."""
        key = metric or self.metric
        out = {}
        for m in self.methods:
            cols = {}
            for env in self.envs:
                vals = self.values(m, env, key)
                excluded = sum(
                    1 for r in self.rows if r["method"] == m and r["env"] == env and r["status"] != "ok"
                )
                cols[env] = {**_mean_std(vals), "excluded": excluded}
            means = [c["mean"] for c in cols.values() if c["count"]]
            # per-repeat average over envs, for the spread of the Avg column
            per_repeat = []
            for r in range(self.repeats):
                vals = [
                    row[key] for row in self.rows
                    if row["method"] == m and row["repeat"] == r and row["status"] == "ok"
                ]
                if len(vals) == len(self.envs):
                    per_repeat.append(sum(vals) / len(vals))
            avg = _mean_std(per_repeat)
            avg["mean"] = sum(means) / len(means) if means else None
            avg["excluded"] = self.repeats - len(per_repeat)
            cols["Avg"] = avg
            out[m] = cols
        return out

    def to_dict(self):
        return {
            "schema": SCHEMA_VERSION,
            "experiment": self.experiment,
            "config_hash": self.config_hash,
            "master_seed": self.master_seed,
            "metric": self.metric,
            "methods": list(self.methods),
            "envs": list(self.envs),
            "repeats": self.repeats,
            "rows": self.rows,
            "gof": self.gof,
            "provenance": self.provenance,
            "flags": self.flags,
            "aggregates": {"error": self.aggregates("error"), "accuracy": self.aggregates("accuracy")},
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {d.get('schema')}")
        return cls(d["experiment"], d["config_hash"], d["master_seed"], d["metric"], list(d["methods"]),
                   list(d["envs"]), d["repeats"], list(d["rows"]), list(d["gof"]), dict(d["provenance"]))


def _mean_std(vals):
    n = len(vals)
    if n == 0:
        return {"mean": None, "std": None, "count": 0}
    mean = math.fsum(vals) / n
    std = math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / (n - 1)) if n > 1 else 0.0
    return {"mean": mean, "std": std, "count": n}


def _csv(rows, fields):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fields, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: "" if row[k] is None else (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in fields})
    return buf.getvalue()


def _markdown(report):
    agg = report.aggregates()
    cols = [*report.envs, "Avg"]
    lines = [
        f"{report.experiment}: {report.metric}, mean ± std over {report.repeats} repeats",
        "",
        "| Method | " + " | ".join(cols) + " |",
        "|---" * (len(cols) + 1) + "|",
    ]

    def cell(c):
        return "n/a" if c["mean"] is None else f"{c['mean']:.3f} ± {c['std']:.3f}"

    for m in report.methods:
        lines.append(f"| {m} | " + " | ".join(cell(agg[m][c]) for c in cols) + " |")
    for flag in report.flags:
        lines.append(f"\n_{flag}_")
    return "\n".join(lines) + "\n"


def render(report, fmt):
    if fmt == "csv":
        return _csv(report.rows, CSV_FIELDS)
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    if fmt in ("md", "markdown"):
        return _markdown(report)
    raise ValueError(f"unknown report format {fmt!r}")


def emit_report(report, fmt, path):
    with open(path, "w", newline="") as fh:
        fh.write(render(report, fmt))


def load_report(path):
    with open(path) as fh:
        return RunReport.from_dict(json.load(fh))


def write_outputs(report, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    emit_report(report, "csv", os.path.join(out_dir, "results.csv"))
    emit_report(report, "json", os.path.join(out_dir, "report.json"))
    emit_report(report, "md", os.path.join(out_dir, "report.md"))
    if report.gof:
        with open(os.path.join(out_dir, "gof.csv"), "w", newline="") as fh:
            fh.write(_csv(report.gof, GOF_FIELDS))


# ---------------------------------------------------------------- experiments


def run_experiment(cfg, jobs=1):
    """Train every method for every repeat and collect a :class:`RunReport`."""
    started = time.time()
    tasks = [(r, m) for r in range(cfg.repeats) for m in cfg.methods]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_task, [cfg] * len(tasks), *zip(*tasks)))
    else:
        results = [_task(cfg, r, m) for r, m in tasks]

    rows = [row for res, _ in results for row in res]
    gof = [row for _, g in results for row in g]
    order = {m: i for i, m in enumerate(cfg.methods)}
    envs = [e.id for e in cfg.test_envs]
    rows.sort(key=lambda row: (order[row["method"]], envs.index(row["env"]), row["repeat"]))
    gof.sort(key=lambda row: (row["feature"], row["env"], row["repeat"], row["class"]))
    return RunReport(
        cfg.id, cfg.hash, cfg.seed, cfg.metric, list(cfg.methods), envs, cfg.repeats, rows, gof,
        {
            "package_version": _version(),
            "schema": SCHEMA_VERSION,
            "config": cfg.to_dict(),
            "repeat_seeds": [derive_seed(cfg.seed, r) for r in range(cfg.repeats)],
            "started": started,
            "finished": time.time(),
        },
    )


def pvalue_series(cfg):
    """Chi-square p-values along training for the ERM and FMI features.

    At every checkpoint each feature is tested in the training environments
    (against a fresh draw from them) and in every validation environment.
    """
    if not cfg.valid_envs:
        raise ConfigError("pvalue_series needs a valid environment")
    rows = []
    for r in range(cfg.repeats):
        data = repeat_data(cfg, r)
        seed = derive_seed(data.seed, _FRESH)
        fresh = concat(
            [generate(e.spec(), e.n, derive_rng(seed, _key(e.id))) for e in cfg.train_envs], "train-fresh"
        )
        train = concat(list(data.train.values()), "train")
        targets = {"train": fresh, **data.valid}
        for method in ("erm", "fmi"):
            mseed = derive_seed(data.seed, _METHOD, METHODS.index(method))
            for step, model in _fit(cfg, method, data.train, mseed):
                for env_id, ds in targets.items():
                    rng = derive_rng(mseed, _GOF, _key(env_id), step)
                    for e in gof_report(model, train, ds, cfg.gof_n, rng).entries:
                        rows.append({
                            "repeat": r, "step": step, "feature": method, "env": env_id,
                            "class": e.k, "statistic": e.statistic, "p_value": e.p_value, "n": e.n,
                        })
    return rows


def pvalue_csv(rows):
    return _csv(rows, PVAL_FIELDS)
