"""Experiment suites: YAML spec parsing, seed-replicated runs, CSV output and SVG plots.

Spec format (YAML, strict: unknown keys are errors)::

    name: demo
    horizon: 2000
    seeds: [0, 1, 2]
    output_dir: results        # optional
    plot: false                # optional
    experiments:
      - name: logistic
        environment: {kind: logistic, K: 50, d: 20, sigma: 0.5, S: 1.0}
        agents:
          - {name: GLM-ES, variant: GlmES, m: 10, lambda: 1.0, sigma_r: 0.1, tau: 500}
          - {name: GLM-ES-DT100, variant: GlmES, tau: 500, anytime: {t0: 100}}

Agent keys map onto :class:`~ensemble_sampling.engine.AgentConfig` fields
(``lambda`` is ``lam``); ``anytime`` onto
:class:`~ensemble_sampling.engine.DoublingSchedule`. Problem instance ``s``
of an experiment is ``generate_instance(kind, K, d, s)``, so seed ``s`` fixes
both the instance and the episode randomness.

Output layout under the output directory, per experiment::

    <experiment>/traces/<agent>__seed<seed>.csv   round,arm,inst_regret,cum_regret
    <experiment>/summary.csv                      agent,t,mean_cum_regret,stderr,wallclock_s
    <experiment>/failures.csv                     only when an episode failed
    <experiment>/regret.svg                       only with plotting on
"""
from __future__ import annotations

import csv
import io
import math
import multiprocessing
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .engine import AgentConfig, DoublingSchedule, StepRule, Variant, run_episode
from .envs import RewardKind, generate_instance
from .errors import BanditError, SpecError

TRACE_COLUMNS = ("round", "arm", "inst_regret", "cum_regret")
SUMMARY_COLUMNS = ("agent", "t", "mean_cum_regret", "stderr", "wallclock_s")
_NAME_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.+-]*$")


def fmt(x: float) -> str:
    return "%.12g" % x


# --- spec types ------------------------------------------------------------

@dataclass(frozen=True)
class EnvironmentSpec:
    kind: RewardKind
    K: int = 50
    d: int = 20
    sigma: float = 0.5
    S: float = 1.0


@dataclass
class ExperimentSpec:
    name: str
    environment: EnvironmentSpec
    agents: list[AgentConfig]


@dataclass
class SuiteSpec:
    name: str
    horizon: int
    seeds: list[int]
    experiments: list[ExperimentSpec]
    output_dir: Optional[str] = None
    plot: bool = False


# --- YAML loading with source positions ------------------------------------

class _Map(dict):
    """Mapping that remembers where it and each of its values start."""

    mark = None

    def __init__(self):
        super().__init__()
        self.marks = {}


class _Loader(yaml.SafeLoader):
    pass


def _construct_mapping(loader, node):
    loader.flatten_mapping(node)
    out = _Map()
    out.mark = node.start_mark
    for key_node, value_node in node.value:
        key = loader.construct_object(key_node, deep=True)
        if key in out:
            raise SpecError(f"duplicate key {key!r}", field=str(key),
                            line=key_node.start_mark.line + 1, column=key_node.start_mark.column + 1)
        out[key] = loader.construct_object(value_node, deep=True)
        out.marks[key] = value_node.start_mark
    return out


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


class _Ctx:
    """Field path plus source position, for error messages."""

    def __init__(self, path: str, mark=None):
        self.path = path
        self.mark = mark

    def child(self, mapping, key) -> "_Ctx":
        sep = "." if self.path else ""
        mark = mapping.marks.get(key) if isinstance(mapping, _Map) else None
        return _Ctx(f"{self.path}{sep}{key}", mark or self.mark)

    def index(self, i, item) -> "_Ctx":
        return _Ctx(f"{self.path}[{i}]", getattr(item, "mark", None) or self.mark)

    def error(self, message: str) -> SpecError:
        line = col = None
        if self.mark is not None:
            line, col = self.mark.line + 1, self.mark.column + 1
        return SpecError(f"{self.path}: {message}", field=self.path, line=line, column=col)


def _mapping(value, ctx: _Ctx, allowed, required=()) -> dict:
    if not isinstance(value, dict):
        raise ctx.error("expected a mapping")
    for key in value:
        if key not in allowed:
            raise ctx.child(value, key).error(f"unknown key (allowed: {', '.join(sorted(allowed))})")
    for key in required:
        if key not in value:
            raise ctx.error(f"missing required key {key!r}")
    return value


def _int(value, ctx, lo=None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ctx.error(f"expected an integer, got {value!r}")
    if lo is not None and value < lo:
        raise ctx.error(f"must be >= {lo}, got {value}")
    return value


def _float(value, ctx, lo=None, strict=False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ctx.error(f"expected a finite number, got {value!r}")
    if lo is not None and (value <= lo if strict else value < lo):
        raise ctx.error(f"must be {'>' if strict else '>='} {lo}, got {value}")
    return float(value)


def _bool(value, ctx) -> bool:
    if not isinstance(value, bool):
        raise ctx.error(f"expected true/false, got {value!r}")
    return value


def _name(value, ctx) -> str:
    if not isinstance(value, str) or not _NAME_RE.match(value):
        raise ctx.error(f"expected a name of letters, digits, '_', '.', '+', '-', got {value!r}")
    return value


_ENV_KEYS = {"kind", "K", "d", "sigma", "S"}


def _parse_environment(raw, ctx) -> EnvironmentSpec:
    raw = _mapping(raw, ctx, _ENV_KEYS, required=("kind",))
    try:
        kind = RewardKind.parse(raw["kind"])
    except (ValueError, BanditError) as exc:
        raise ctx.child(raw, "kind").error(str(exc)) from None
    kw = {"kind": kind}
    if "K" in raw:
        kw["K"] = _int(raw["K"], ctx.child(raw, "K"), lo=2)
    if "d" in raw:
        kw["d"] = _int(raw["d"], ctx.child(raw, "d"), lo=1)
    if "sigma" in raw:
        kw["sigma"] = _float(raw["sigma"], ctx.child(raw, "sigma"), lo=0.0)
    if "S" in raw:
        kw["S"] = _float(raw["S"], ctx.child(raw, "S"), lo=0.0, strict=True)
    return EnvironmentSpec(**kw)


# yaml key -> (AgentConfig field, parser)
_AGENT_INT = {"m": 1, "tau": 0, "iters": 1, "width": 2, "depth": 2, "n_threads": 1}
_AGENT_FLOAT = {"lambda": ("lam", 0.0, True), "sigma_r": ("sigma_r", 0.0, False),
                "step": ("step", 0.0, True), "eps": ("eps", 0.0, True),
                "design_tol": ("design_tol", 0.0, True), "alpha": ("alpha", 0.0, False),
                "posterior_scale": ("posterior_scale", 0.0, False),
                "prior_scale": ("prior_scale", 0.0, False)}
_AGENT_KEYS = ({"name", "variant", "step_rule", "warm_start", "link", "anytime"}
               | set(_AGENT_INT) | set(_AGENT_FLOAT))
_ANYTIME_KEYS = {"t0", "b", "m_coef", "sigma_coef"}


def _parse_agent(raw, ctx) -> AgentConfig:
    raw = _mapping(raw, ctx, _AGENT_KEYS, required=("variant",))
    try:
        variant = Variant.parse(raw["variant"])
    except BanditError as exc:
        raise ctx.child(raw, "variant").error(str(exc)) from None
    kw = {"variant": variant}
    if "name" in raw:
        kw["name"] = _name(raw["name"], ctx.child(raw, "name"))
    for key, lo in _AGENT_INT.items():
        if key in raw:
            kw[key] = _int(raw[key], ctx.child(raw, key), lo=lo)
    for key, (attr, lo, strict) in _AGENT_FLOAT.items():
        if key in raw:
            kw[attr] = _float(raw[key], ctx.child(raw, key), lo=lo, strict=strict)
    if "step_rule" in raw:
        try:
            kw["step_rule"] = StepRule(raw["step_rule"])
        except ValueError:
            raise ctx.child(raw, "step_rule").error(
                f"expected one of {[r.value for r in StepRule]}, got {raw['step_rule']!r}") from None
    if "warm_start" in raw:
        kw["warm_start"] = _bool(raw["warm_start"], ctx.child(raw, "warm_start"))
    if "link" in raw:
        if raw["link"] not in ("identity", "logistic"):
            raise ctx.child(raw, "link").error(f"expected 'identity' or 'logistic', got {raw['link']!r}")
        kw["link"] = raw["link"]
    if "anytime" in raw:
        actx = ctx.child(raw, "anytime")
        araw = _mapping(raw["anytime"], actx, _ANYTIME_KEYS)
        akw = {}
        if "t0" in araw:
            akw["t0"] = _int(araw["t0"], actx.child(araw, "t0"), lo=1)
        if "b" in araw:
            akw["b"] = _float(araw["b"], actx.child(araw, "b"), lo=1.0, strict=True)
        for key in ("m_coef", "sigma_coef"):
            if key in araw:
                akw[key] = _float(araw[key], actx.child(araw, key), lo=0.0)
        kw["anytime"] = DoublingSchedule(**akw)
    if variant is Variant.NEURAL_ES and kw.get("width", 20) % 2:
        raise ctx.child(raw, "width").error("must be even")
    try:
        return AgentConfig(**kw)
    except BanditError as exc:
        raise ctx.error(str(exc)) from None


def _parse_experiment(raw, ctx, horizon) -> ExperimentSpec:
    raw = _mapping(raw, ctx, {"name", "environment", "agents"}, required=("name", "environment", "agents"))
    name = _name(raw["name"], ctx.child(raw, "name"))
    env = _parse_environment(raw["environment"], ctx.child(raw, "environment"))
    actx = ctx.child(raw, "agents")
    if not isinstance(raw["agents"], list) or not raw["agents"]:
        raise actx.error("expected a non-empty list of agents")
    agents = [_parse_agent(a, actx.index(i, a)) for i, a in enumerate(raw["agents"])]
    seen = set()
    for i, agent in enumerate(agents):
        ictx = actx.index(i, raw["agents"][i])
        if agent.name in seen:
            raise ictx.error(f"duplicate agent name {agent.name!r}")
        seen.add(agent.name)
        if agent.variant is Variant.GLM_ES and agent.anytime is None and 0 < agent.tau < env.d:
            raise ictx.error(f"tau = {agent.tau} must be 0 or at least d = {env.d}")
        if agent.anytime is None and agent.variant in (Variant.GLM_ES, Variant.NEURAL_ES) \
                and horizon <= agent.tau:
            raise ictx.error(f"horizon {horizon} must exceed tau = {agent.tau}")
    return ExperimentSpec(name=name, environment=env, agents=agents)


_TOP_KEYS = {"name", "horizon", "seeds", "output_dir", "plot", "experiments"}


def parse_spec_text(text: str) -> SuiteSpec:
    try:
        raw = yaml.load(text, Loader=_Loader)
    except SpecError:
        raise
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        line, col = (mark.line + 1, mark.column + 1) if mark else (None, None)
        raise SpecError(f"YAML parse error: {exc.problem or exc}", line=line, column=col) from None
    except yaml.YAMLError as exc:
        raise SpecError(f"YAML parse error: {exc}") from None
    ctx = _Ctx("")
    if raw is None:
        raise SpecError("empty spec")
    raw = _mapping(raw, ctx, _TOP_KEYS, required=("name", "horizon", "seeds", "experiments"))
    name = _name(raw["name"], ctx.child(raw, "name"))
    horizon = _int(raw["horizon"], ctx.child(raw, "horizon"), lo=1)
    sctx = ctx.child(raw, "seeds")
    if not isinstance(raw["seeds"], list) or not raw["seeds"]:
        raise sctx.error("expected a non-empty list of seeds")
    seeds = [_int(s, sctx.index(i, s), lo=0) for i, s in enumerate(raw["seeds"])]
    for s, i in zip(seeds, range(len(seeds))):
        if s >= 2 ** 64:
            raise sctx.index(i, s).error("seeds must fit in 64 bits")
    if len(set(seeds)) != len(seeds):
        raise sctx.error("seeds must be distinct")
    output_dir = raw.get("output_dir")
    if output_dir is not None and not isinstance(output_dir, str):
        raise ctx.child(raw, "output_dir").error("expected a path string")
    plot = _bool(raw["plot"], ctx.child(raw, "plot")) if "plot" in raw else False
    ectx = ctx.child(raw, "experiments")
    if not isinstance(raw["experiments"], list) or not raw["experiments"]:
        raise ectx.error("expected a non-empty list of experiments")
    experiments = [_parse_experiment(e, ectx.index(i, e), horizon)
                   for i, e in enumerate(raw["experiments"])]
    names = [e.name for e in experiments]
    if len(set(names)) != len(names):
        raise ectx.error("experiment names must be distinct")
    return SuiteSpec(name=name, horizon=horizon, seeds=seeds, experiments=experiments,
                     output_dir=output_dir, plot=plot)


def parse_spec(path) -> SuiteSpec:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise SpecError(f"cannot read spec {path}: {exc.strerror}") from None
    return parse_spec_text(text)


# --- serialisation ---------------------------------------------------------

def _agent_to_dict(agent: AgentConfig) -> dict:
    defaults = AgentConfig(agent.variant)
    out = {"name": agent.name, "variant": agent.variant.value}
    for f in fields(AgentConfig):
        if f.name in ("name", "variant"):
            continue
        value = getattr(agent, f.name)
        if value == getattr(defaults, f.name):
            continue
        key = "lambda" if f.name == "lam" else f.name
        if f.name == "anytime":
            value = {"t0": value.t0, "b": value.b, "m_coef": value.m_coef,
                     "sigma_coef": value.sigma_coef}
        elif f.name == "step_rule":
            value = value.value
        out[key] = value
    return out


def spec_to_dict(spec: SuiteSpec) -> dict:
    out = {"name": spec.name, "horizon": spec.horizon, "seeds": list(spec.seeds)}
    if spec.output_dir is not None:
        out["output_dir"] = spec.output_dir
    out["plot"] = spec.plot
    out["experiments"] = [
        {"name": e.name,
         "environment": {"kind": e.environment.kind.value, "K": e.environment.K,
                         "d": e.environment.d, "sigma": e.environment.sigma,
                         "S": e.environment.S},
         "agents": [_agent_to_dict(a) for a in e.agents]}
        for e in spec.experiments
    ]
    return out


def serialize_spec(spec: SuiteSpec) -> str:
    return yaml.safe_dump(spec_to_dict(spec), sort_keys=False, default_flow_style=None)


# --- running ---------------------------------------------------------------

@dataclass
class EpisodeResult:
    experiment: str
    agent: str
    seed: int
    cum: Optional[np.ndarray]
    wall_seconds: float
    trace_path: Optional[Path]
    error: Optional[str] = None


@dataclass
class Summary:
    """Per-agent mean and standard error of cumulative regret at t = 1..T."""

    experiment: str
    horizon: int
    agents: list[str]
    mean: dict[str, np.ndarray]
    stderr: dict[str, np.ndarray]
    wallclock: dict[str, float]
    n_seeds: dict[str, int]


@dataclass
class SuiteResult:
    out_dir: Path
    episodes: list[EpisodeResult] = field(default_factory=list)
    summaries: dict[str, Summary] = field(default_factory=dict)

    @property
    def failures(self) -> list[EpisodeResult]:
        return [e for e in self.episodes if e.error is not None]

    @property
    def exit_code(self) -> int:
        return 1 if self.failures else 0


def trace_path(out_dir, experiment: str, agent: str, seed: int) -> Path:
    return Path(out_dir) / experiment / "traces" / f"{agent}__seed{seed}.csv"


def write_trace(trace, path) -> Path:
    """Write one :class:`RegretTrace` as CSV; the bytes depend only on the trace."""
    path = Path(path)
    buf = io.StringIO()
    buf.write(",".join(TRACE_COLUMNS) + "\n")
    for t, (a, r, c) in enumerate(zip(trace.arms, trace.inst, trace.cum), start=1):
        buf.write(f"{t},{int(a)},{fmt(r)},{fmt(c)}\n")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(buf.getvalue())
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write trace {path}: {exc.strerror}") from None
    return path


def read_trace(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    cols = list(zip(*rows)) if rows else [[]] * len(header)
    out = {}
    for name, col in zip(header, cols):
        out[name] = np.array(col, dtype=np.int64 if name in ("round", "arm") else float)
    return out


def _run_one(task):
    exp, env, agent, seed, horizon, out_dir = task
    path = trace_path(out_dir, exp, agent.name, seed)
    try:
        arms, model = generate_instance(env.kind, env.K, env.d, seed,
                                        noise_sigma=env.sigma, S=env.S)
        trace = run_episode(model, arms, agent, horizon, seed)
        write_trace(trace, path)
        return EpisodeResult(exp, agent.name, seed, trace.cum, trace.wall_seconds, path)
    except (BanditError, ArithmeticError, ValueError, OSError, np.linalg.LinAlgError) as exc:
        return EpisodeResult(exp, agent.name, seed, None, 0.0, None,
                             error=f"{type(exc).__name__}: {exc}")


def summarize(experiment: str, horizon: int, agents: list[str], episodes) -> Summary:
    mean, stderr, wall, counts = {}, {}, {}, {}
    for name in agents:
        ok = [e for e in episodes if e.agent == name and e.error is None]
        wall[name] = float(sum(e.wall_seconds for e in ok))
        counts[name] = len(ok)
        if not ok:
            mean[name] = np.full(horizon, np.nan)
            stderr[name] = np.full(horizon, np.nan)
            continue
        curves = np.stack([e.cum for e in ok])
        mean[name] = curves.mean(axis=0)
        stderr[name] = (curves.std(axis=0, ddof=1) / math.sqrt(len(ok))
                        if len(ok) > 1 else np.zeros(horizon))
    return Summary(experiment, horizon, list(agents), mean, stderr, wall, counts)


def write_summary(summary: Summary, path) -> Path:
    path = Path(path)
    buf = io.StringIO()
    buf.write(",".join(SUMMARY_COLUMNS) + "\n")
    for name in summary.agents:
        wall = fmt(summary.wallclock[name])
        for t, (m, s) in enumerate(zip(summary.mean[name], summary.stderr[name]), start=1):
            buf.write(f"{name},{t},{fmt(m)},{fmt(s)},{wall}\n")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(buf.getvalue())
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write summary {path}: {exc.strerror}") from None
    return path


def read_summary(path) -> Summary:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    agents = list(dict.fromkeys(r["agent"] for r in rows))
    mean, stderr, wall = {}, {}, {}
    for name in agents:
        mine = [r for r in rows if r["agent"] == name]
        mean[name] = np.array([float(r["mean_cum_regret"]) for r in mine])
        stderr[name] = np.array([float(r["stderr"]) for r in mine])
        wall[name] = float(mine[0]["wallclock_s"])
    horizon = max(len(v) for v in mean.values()) if mean else 0
    return Summary(Path(path).parent.name, horizon, agents, mean, stderr, wall,
                   {a: 0 for a in agents})


def emit_plot(summary: Summary, path, max_points: int = 2000) -> Path:
    """Mean cumulative regret per agent with a shaded +-stderr band, as SVG.

    Each curve is one ``<path>`` inside a group with id ``series-<agent>``.
    Output bytes depend only on the summary.
    """
    import matplotlib
    from matplotlib.backends.backend_svg import FigureCanvasSVG
    from matplotlib.figure import Figure

    if not summary.agents:
        raise ValueError("summary has no agents to plot")
    T = summary.horizon
    t = np.arange(1, T + 1)
    idx = np.unique(np.linspace(0, T - 1, min(T, max_points)).round().astype(int))
    with matplotlib.rc_context({"svg.hashsalt": "ensemble-sampling", "svg.fonttype": "path"}):
        fig = Figure(figsize=(6.4, 4.2))
        FigureCanvasSVG(fig)
        ax = fig.add_subplot()
        top = 0.0
        for name in summary.agents:
            m = summary.mean[name][idx]
            s = summary.stderr[name][idx]
            (line,) = ax.plot(t[idx], m, label=name, linewidth=1.4)
            line.set_gid(f"series-{name}")
            band = ax.fill_between(t[idx], m - s, m + s, alpha=0.2, color=line.get_color(),
                                   linewidth=0)
            band.set_gid(f"band-{name}")
            finite = np.isfinite(m + s)
            if finite.any():
                top = max(top, float(np.max((m + s)[finite])))
        ax.set_xlim(0, T)
        ax.set_ylim(0, top if top > 0 else 1.0)
        ax.set_xlabel("round t")
        ax.set_ylabel("cumulative regret")
        ax.set_title(summary.experiment)
        ax.legend(loc="upper left")
        fig.tight_layout()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, format="svg", metadata={"Date": None})
    return path


def run_suite(spec: SuiteSpec, out_dir, parallel: int = 1, plot: Optional[bool] = None,
              seeds: Optional[list[int]] = None) -> SuiteResult:
    """Run every (experiment, agent, seed) episode and write traces, summaries and plots.

    A failing episode is recorded in ``failures.csv`` and left out of the
    summary; the remaining episodes still run.
    """
    out_dir = Path(out_dir)
    seeds = list(spec.seeds if seeds is None else seeds)
    plot = spec.plot if plot is None else plot
    tasks = [(e.name, e.environment, a, s, spec.horizon, out_dir)
             for e in spec.experiments for a in e.agents for s in seeds]
    if parallel > 1 and len(tasks) > 1:
        # spawn, not fork: forking after OpenMP threads exist can deadlock the workers
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=parallel, mp_context=ctx) as pool:
            episodes = list(pool.map(_run_one, tasks))
    else:
        episodes = [_run_one(t) for t in tasks]
    result = SuiteResult(out_dir, episodes)
    for exp in spec.experiments:
        mine = [e for e in episodes if e.experiment == exp.name]
        names = [a.name for a in exp.agents]
        summary = summarize(exp.name, spec.horizon, names, mine)
        result.summaries[exp.name] = summary
        write_summary(summary, out_dir / exp.name / "summary.csv")
        failed = [e for e in mine if e.error is not None]
        fail_path = out_dir / exp.name / "failures.csv"
        if failed:
            with open(fail_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(("agent", "seed", "error"))
                for e in failed:
                    w.writerow((e.agent, e.seed, e.error))
        elif fail_path.exists():
            fail_path.unlink()
        if plot and any(summary.n_seeds.values()):
            emit_plot(summary, out_dir / exp.name / "regret.svg")
    return result


def with_seeds(spec: SuiteSpec, seeds: list[int]) -> SuiteSpec:
    return replace(spec, seeds=list(seeds))


def default_output_dir(spec: SuiteSpec, flag: Optional[str] = None) -> Path:
    """``--out`` flag, then ``ENSEMBLE_SAMPLING_OUT``, then the spec's ``output_dir``, then ./results."""
    if flag:
        return Path(flag)
    env = os.environ.get("ENSEMBLE_SAMPLING_OUT")
    if env:
        return Path(env)
    if spec.output_dir:
        return Path(spec.output_dir)
    return Path("results")
