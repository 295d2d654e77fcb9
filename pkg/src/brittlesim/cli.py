"""Command-line driver: generate, train, eval-rejection, sweep, study, select.

Every command reads a YAML config, writes its outputs plus the resolved
config (with every default filled in) to the output directory, and exits
with 0 on success, 1 on a runtime failure and 2 on an invalid config.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .analysis import summarize_study, training_curve, write_curve_csv
from .core import (
    BaselineGaussian,
    LearnedFlow,
    estimate_acceptance_rate,
    rejection_rate_map,
    rng_stream,
    write_rate_map_csv,
)
from .flow import FlowModel
from .simulators import (
    AnnulusConfig,
    BallsConfig,
    LGSSMConfig,
    generate_dataset,
    load_dataset,
    make_simulator,
    save_dataset,
)
from .smc import SweepConfig, evidence_variance_study, model_select, run_sweeps, write_sweeps_csv
from .training import PairPool, TrainConfig, calibrate_annulus_tau, collect_pairs, fit_proposal

log = logging.getLogger("brittlesim")

SIM_CONFIGS = {"annulus": AnnulusConfig, "balls": BallsConfig, "lgssm": LGSSMConfig}


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"config field '{field_name}': {message}")


@dataclass
class FlowSettings:
    hidden: int = 64
    n_blocks: int = 5


@dataclass
class DataSettings:
    T: int = 50
    n_datasets: int = 25


@dataclass
class EvalSettings:
    n_trials: int = 100_000
    rollout_length: int = 50
    n_trajectories: int = 100


@dataclass
class ExperimentConfig:
    model: str
    seed: int = 0
    simulator: dict = field(default_factory=dict)
    target_rejection: float = 0.75
    flow: FlowSettings = field(default_factory=FlowSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    data: DataSettings = field(default_factory=DataSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    output_dir: str = "out"

    def resolved(self) -> dict:
        out = dataclasses.asdict(self)
        out["simulator"] = dict(self.simulator)
        return out


def _section(cls, raw, name: str, **overrides):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(name, "expected a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown field")
    kwargs = {**raw, **overrides}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(name, str(exc)) from exc


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping")
    allowed = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key in raw:
        if key not in allowed:
            raise ConfigError(key, "unknown field")
    model = raw.get("model")
    if model not in SIM_CONFIGS:
        raise ConfigError("model", f"must be one of {sorted(SIM_CONFIGS)}, got {model!r}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed", "must be a non-negative integer")
    sim_raw = raw.get("simulator") or {}
    if not isinstance(sim_raw, dict):
        raise ConfigError("simulator", "expected a mapping")
    sim_fields = {f.name for f in dataclasses.fields(SIM_CONFIGS[model])}
    for key in sim_raw:
        if key not in sim_fields:
            raise ConfigError(f"simulator.{key}", f"unknown field for model {model}")
    target = raw.get("target_rejection", 0.75)
    if not isinstance(target, (int, float)) or not 0 < target < 1:
        raise ConfigError("target_rejection", "must lie strictly between 0 and 1")
    train_raw = dict(raw.get("train") or {})
    sweep_raw = dict(raw.get("sweep") or {})
    cfg = ExperimentConfig(
        model=model,
        seed=seed,
        simulator=dict(sim_raw),
        target_rejection=float(target),
        flow=_section(FlowSettings, raw.get("flow"), "flow"),
        train=_section(TrainConfig, train_raw, "train", seed=train_raw.get("seed", seed)),
        sweep=_section(SweepConfig, sweep_raw, "sweep", seed=sweep_raw.get("seed", seed)),
        data=_section(DataSettings, raw.get("data"), "data"),
        eval=_section(EvalSettings, raw.get("eval"), "eval"),
        output_dir=str(raw.get("output_dir", "out")),
    )
    if cfg.flow.hidden < 0 or cfg.flow.n_blocks < 1:
        raise ConfigError("flow", "hidden must be >= 0 and n_blocks >= 1")
    if cfg.data.T < 1 or cfg.data.n_datasets < 1:
        raise ConfigError("data", "T and n_datasets must be >= 1")
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"not valid YAML: {exc}") from exc
    return parse_config(raw)


def build_simulator(cfg: ExperimentConfig):
    """Instantiate the simulator; an annulus ``tau: auto`` (or missing) is calibrated."""
    params = dict(cfg.simulator)
    calibrate = cfg.model == "annulus" and params.get("tau", "auto") == "auto"
    if calibrate:
        params.pop("tau", None)
    try:
        sim = make_simulator(cfg.model, params)
    except (TypeError, ValueError) as exc:
        raise ConfigError("simulator", str(exc)) from exc
    if calibrate:
        sim = calibrate_annulus_tau(sim, cfg.target_rejection, seed=cfg.seed)
        cfg.simulator["tau"] = sim.config.tau
        log.info("calibrated tau = %.6g", sim.config.tau)
    return sim


def _out_dir(cfg: ExperimentConfig, args) -> Path:
    out = Path(args.out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def echo_config(cfg: ExperimentConfig, out: Path, command: str, args) -> None:
    extra = {k: v for k, v in vars(args).items() if k not in ("func", "config") and v is not None}
    doc = {"command": command, "seed": cfg.seed, "flags": extra, "config": cfg.resolved()}
    with open(out / f"resolved_{command}.yaml", "w") as fh:
        yaml.safe_dump(_plain(doc), fh, sort_keys=True)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _load_flow(path, sim) -> FlowModel:
    return FlowModel.load(path, expected_fingerprint=sim.fingerprint())


def _proposal(args, sim):
    if getattr(args, "model", None):
        return LearnedFlow(_load_flow(args.model, sim))
    return BaselineGaussian(sim.baseline_scales())


def _eval_states(cfg: ExperimentConfig, sim) -> np.ndarray:
    baseline = BaselineGaussian(sim.baseline_scales())
    pool = collect_pairs(
        sim, baseline, sim.sample_prior, cfg.eval.rollout_length, cfg.eval.n_trajectories, cfg.seed + 10_000
    )
    return pool.x_prev


# ---- commands ----------------------------------------------------------------


def cmd_generate(cfg: ExperimentConfig, args) -> int:
    sim = build_simulator(cfg)
    out = _out_dir(cfg, args)
    n = args.n_datasets or cfg.data.n_datasets
    T = args.T or cfg.data.T
    for i in range(n):
        ds = generate_dataset(sim, T, int(rng_stream(cfg.seed, 3, i).integers(2**63)))
        save_dataset(ds, out / f"dataset_{i:03d}.csv", cfg.resolved())
    echo_config(cfg, out, "generate", args)
    print(f"wrote {n} datasets of length {T} to {out}")
    return 0


def cmd_train(cfg: ExperimentConfig, args) -> int:
    sim = build_simulator(cfg)
    out = _out_dir(cfg, args)
    tcfg = cfg.train
    if args.fresh:
        tcfg = dataclasses.replace(tcfg, fresh_samples=True)
    if args.iterations is not None:
        tcfg = dataclasses.replace(tcfg, iterations=args.iterations)
    pool = PairPool.from_csv(args.pairs) if args.pairs else None
    result, train, heldout = fit_proposal(sim, tcfg, hidden=cfg.flow.hidden, n_blocks=cfg.flow.n_blocks, pool=pool)
    model_path = Path(args.out_model) if args.out_model else out / "flow.npz"
    model_path.parent.mkdir(parents=True, exist_ok=True)
    result.flow.save(model_path)
    result.write_metrics_csv(out / "metrics.csv")
    write_curve_csv(out / "rejection_curve.csv", *training_curve(result.metrics))
    if pool is None:
        PairPool(
            np.concatenate([train.x_prev, heldout.x_prev]),
            np.concatenate([train.z, heldout.z]),
            np.concatenate([train.trajectory, heldout.trajectory]),
        ).to_csv(out / "pairs.csv")
    cfg.train = tcfg
    echo_config(cfg, out, "train", args)
    last = result.metrics[-1] if result.metrics else {}
    print(f"model: {model_path}")
    print(f"final held-out objective: {last.get('heldout_objective')}")
    print(f"final rejection rate: {last.get('rejection_rate')}")
    return 0


def cmd_eval_rejection(cfg: ExperimentConfig, args) -> int:
    sim = build_simulator(cfg)
    out = _out_dir(cfg, args)
    prop = _proposal(args, sim)
    n = args.n or cfg.eval.n_trials
    est = estimate_acceptance_rate(sim, _eval_states(cfg, sim), prop, n, rng_stream(cfg.seed, 4))
    label = "flow" if args.model else "baseline"
    lines = [
        f"proposal: {label}",
        f"trials: {est.n_trials}",
        f"rejection_rate: {est.rejection:.6f}",
        f"rejection_95ci: [{1 - est.upper:.6f}, {1 - est.lower:.6f}]",
    ]
    if args.map:
        if cfg.model != "balls":
            raise ConfigError("model", "--map is only defined for the balls model")
        c = sim.config
        grid = np.linspace(c.radius + 0.5, c.box - c.radius - 0.5, args.map_cells)
        # default: second ball at rest against the right wall, mid-height
        frozen = np.array(args.frozen if args.frozen else [0.0, 0.0, 0.0, 0.0, c.box - c.radius, c.box / 2, 0.0, 0.0])
        rates = rejection_rate_map(sim, grid, grid, frozen, prop, args.map_trials, rng_stream(cfg.seed, 5))
        write_rate_map_csv(out / f"rate_map_{label}.csv", grid, grid, rates, args.map_trials)
        lines.append(f"rate_map: {out / f'rate_map_{label}.csv'}")
    text = "\n".join(lines)
    (out / f"rejection_{label}.txt").write_text(text + "\n")
    echo_config(cfg, out, "eval-rejection", args)
    print(text)
    return 0


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    sim = build_simulator(cfg)
    out = _out_dir(cfg, args)
    ds = load_dataset(args.dataset)
    if ds.model_id not in (cfg.model, "unknown"):
        raise ConfigError("model", f"dataset was generated for {ds.model_id!r}")
    n = args.n_sweeps or 50
    results = run_sweeps(sim, _proposal(args, sim), ds.y, n, cfg.sweep, 6)
    write_sweeps_csv(out / "sweeps.csv", results)
    echo_config(cfg, out, "sweep", args)
    Ls = np.array([r.log_evidence for r in results])
    good = Ls[np.isfinite(Ls)]
    print(f"sweeps: {n}, failed: {n - len(good)}")
    if len(good):
        print(f"mean log-evidence: {good.mean():.6f}")
    if len(good) > 1:
        print(f"variance: {good.var(ddof=1):.6f}")
    return 0


def cmd_study(cfg: ExperimentConfig, args) -> int:
    sim = build_simulator(cfg)
    out = _out_dir(cfg, args)
    flow = _load_flow(args.model, sim)
    n_data = args.n_datasets or cfg.data.n_datasets
    datasets = [
        generate_dataset(sim, cfg.data.T, int(rng_stream(cfg.seed, 3, i).integers(2**63))).y for i in range(n_data)
    ]
    proposals = {"p": BaselineGaussian(sim.baseline_scales()), "q": LearnedFlow(flow)}
    table = evidence_variance_study(sim, datasets, proposals, args.n_sweeps or 50, cfg.sweep)
    table.to_csv(out / "study.csv")
    summary = summarize_study(table, "p", "q").text("p", "q")
    (out / "summary.txt").write_text(summary + "\n")
    echo_config(cfg, out, "study", args)
    print(summary)
    return 0


def _read_hypotheses(path, cfg: ExperimentConfig):
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError("hypotheses", f"cannot read {path}: {exc}") from exc
    items = raw.get("hypotheses") if isinstance(raw, dict) else raw
    if not isinstance(items, list) or len(items) < 2:
        raise ConfigError("hypotheses", "need a list of at least two hypotheses")
    hyps = []
    for i, item in enumerate(items):
        if not isinstance(item, dict) or "label" not in item:
            raise ConfigError(f"hypotheses[{i}]", "each entry needs a label and simulator overrides")
        params = {**cfg.simulator, **(item.get("simulator") or {})}
        try:
            sim = make_simulator(cfg.model, params)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"hypotheses[{i}].simulator", str(exc)) from exc
        hyps.append((str(item["label"]), sim))
    return hyps


def cmd_select(cfg: ExperimentConfig, args) -> int:
    base = build_simulator(cfg)
    out = _out_dir(cfg, args)
    hyps = _read_hypotheses(args.hypotheses, cfg)
    proposal = None
    if args.model:
        # one flow shared by every hypothesis, checked against the base config
        proposal = LearnedFlow(_load_flow(args.model, base))
    if args.dataset:
        y = load_dataset(args.dataset).y
    else:
        y = generate_dataset(base, cfg.data.T, cfg.seed).y
    res = model_select(hyps, y, proposal, args.n_sweeps or 20, cfg.sweep)
    report = res.report()
    (out / "selection.csv").write_text(report + "\n")
    echo_config(cfg, out, "select", args)
    print(report)
    return 0


# ---- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="brittlesim", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("config", help="YAML experiment config")
        p.add_argument("--out-dir", help="output directory (overrides output_dir in the config)")

    p = sub.add_parser("generate", help="write synthetic datasets")
    common(p)
    p.add_argument("--n-datasets", type=int)
    p.add_argument("-T", type=int, help="observations per dataset")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="fit the learned proposal")
    common(p)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--pairs", help="pre-collected pair pool CSV")
    src.add_argument("--fresh", action="store_true", help="draw fresh accepted pairs every iteration")
    p.add_argument("--out-model", help="model file (default <out-dir>/flow.npz)")
    p.add_argument("--iterations", type=int, help="override train.iterations")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-rejection", help="single-call rejection rate")
    common(p)
    p.add_argument("--model", help="trained flow (baseline Gaussian if omitted)")
    p.add_argument("--n", type=int, help="number of trials")
    p.add_argument("--map", action="store_true", help="balls only: also write a rejection map")
    p.add_argument("--map-cells", type=int, default=15)
    p.add_argument("--map-trials", type=int, default=400)
    p.add_argument("--frozen", type=float, nargs="+", help="full state used for the map (ball 1 entries ignored)")
    p.set_defaults(func=cmd_eval_rejection)

    p = sub.add_parser("sweep", help="SMC sweeps on one dataset")
    common(p)
    p.add_argument("--model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--n-sweeps", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("study", help="evidence-variance study, baseline versus flow")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--n-datasets", type=int)
    p.add_argument("--n-sweeps", type=int)
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("select", help="model selection by SMC evidence")
    common(p)
    p.add_argument("--hypotheses", required=True, help="YAML list of {label, simulator overrides}")
    p.add_argument("--model")
    p.add_argument("--dataset")
    p.add_argument("--n-sweeps", type=int)
    p.set_defaults(func=cmd_select)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures map to exit code 1
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
