"""Config-driven experiment runner.

Subcommands: simulate-data, pilot, tune, run, posthoc-epsilon, combine,
report.  A single JSON config describes the model, the prior/proposal,
the iteration counts, the threshold (or a target acceptance count) and
the tuning mode; artifacts live under the config's output directory
(optionally prefixed by the LAZYABC_OUTPUT_ROOT environment variable).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import reporting
from .distributions import DensityPair, GammaPrior, GaussianMixtureProposal, UniformBox
from .models import extremes as ext
from .models import sir
from .sampler import (
    combine,
    load_sample_set,
    posthoc_epsilon,
    posthoc_target_acceptances,
    run_abc_is,
    run_lazy_abc,
    save_sample_set,
)
from .streams import stream
from .tuning import (
    LocationSearch,
    TuningReport,
    load_pilot_record,
    run_pilot,
    save_pilot_record,
    select_configuration,
    tune_discrete_multistop,
    tune_one_continuous_multistop,
    tune_single,
)

DATA_SLOT = 999  # stream slot reserved for observed-data generation
PILOT_SEED_OFFSET = 1_000_000  # keeps pilot streams clear of main-run streams


class CliError(RuntimeError):
    pass


class RunLock:
    """One command at a time per output directory."""

    def __init__(self, directory: str):
        os.makedirs(directory, exist_ok=True)
        self.path = os.path.join(directory, ".lock")
        self.fd = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CliError(
                f"another command holds the lock {self.path}; remove it if stale"
            ) from None
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            os.remove(self.path)


# ---------------------------------------------------------------------------
# config handling


def load_config(path: str, overrides: argparse.Namespace) -> dict:
    with open(path) as fh:
        cfg = json.load(fh)
    if getattr(overrides, "seed", None) is not None:
        cfg["base_seed"] = overrides.seed
    if getattr(overrides, "workers", None) is not None:
        cfg["workers"] = overrides.workers
    if getattr(overrides, "cost_mode", None) is not None:
        cfg["cost_mode"] = overrides.cost_mode
    cfg.setdefault("workers", 1)
    cfg.setdefault("cost_mode", "sim")
    if ("epsilon" in cfg) == ("target_acceptances" in cfg):
        raise CliError("set exactly one of 'epsilon' and 'target_acceptances'")
    if cfg.get("base_seed", 0) < 0 or cfg.get("n_main", 1) < 1 or cfg.get("n_pilot", 1) < 1:
        raise CliError("seeds and iteration counts must be positive")
    root = os.environ.get("LAZYABC_OUTPUT_ROOT")
    out = cfg.get("output_dir", "out")
    cfg["output_dir"] = os.path.join(root, out) if root else out
    return cfg


def _data_dir(cfg) -> str:
    return os.path.join(cfg["output_dir"], "data")


def _pilot_dir(cfg) -> str:
    return os.path.join(cfg["output_dir"], "pilot")


def _tune_path(cfg) -> str:
    return os.path.join(cfg["output_dir"], "tuning_report.json")


def build_prior(spec: dict):
    kind = spec["kind"]
    if kind == "gamma":
        return GammaPrior(spec["shape"], spec.get("rate", 1.0))
    if kind == "uniform":
        return UniformBox(tuple(spec["low"]), tuple(spec["high"]))
    raise CliError(f"unknown prior kind {kind!r}")


def build_densities(cfg) -> DensityPair:
    prior = build_prior(cfg["prior"])
    proposal_spec = cfg.get("proposal", {"kind": "prior"})
    if proposal_spec["kind"] == "prior":
        return DensityPair.rejection(prior)
    if proposal_spec["kind"] == "mixture-from-run":
        source = load_sample_set(proposal_spec["path"])
        dist = source.distances()
        quantile = proposal_spec.get("quantile", 0.3)
        cut = np.nanquantile(dist, quantile)
        good = source.thetas()[np.nan_to_num(dist, nan=math.inf) <= cut]
        if not isinstance(prior, UniformBox):
            raise CliError("mixture proposals require a box prior support")
        proposal = GaussianMixtureProposal.from_samples(
            good,
            prior,
            n_components=proposal_spec.get("components", 200),
            seed=proposal_spec.get("seed", 0),
        )
        return DensityPair(prior, proposal)
    raise CliError(f"unknown proposal kind {proposal_spec['kind']!r}")


def _integer_locations(n: int, rng: np.random.Generator) -> np.ndarray:
    seen = set()
    out = []
    while len(out) < n:
        pt = tuple(int(v) for v in rng.integers(0, 11, size=2))
        if pt not in seen:
            seen.add(pt)
            out.append(pt)
    return np.asarray(out, dtype=float)


def build_model(cfg):
    """Build the staged model bound to the observed data on disk."""
    m = cfg["model"]
    data_dir = _data_dir(cfg)
    if m["id"] == "sir":
        with open(os.path.join(data_dir, "observed.json")) as fh:
            observed = json.load(fh)["y_obs"]
        config = sir.SirConfig(
            population=m.get("population", 100_000),
            initial_infected=m.get("initial_infected", 1_000),
            initial_recovered=m.get("initial_recovered", 0),
            checkpoint_transitions=m.get("checkpoint_transitions", 1_000),
            subsample_size=m.get("subsample_size", 100),
            observed_count=int(observed),
        )
        return sir.sir_staged_model(config), config
    if m["id"] == "extremes":
        locations = np.loadtxt(os.path.join(data_dir, "locations.csv"), delimiter=",")
        data = np.loadtxt(os.path.join(data_dir, "data.csv"), delimiter=",")
        config = _extremes_config(m, locations)
        return ext.extremes_staged_model(config, data), config
    raise CliError(f"unknown model id {m['id']!r}")


def _extremes_config(m: dict, locations: np.ndarray) -> ext.SchlatherConfig:
    subset = m.get("initial_subset")
    return ext.SchlatherConfig(
        locations=locations,
        n_years=m.get("n_years", 50),
        n_clusters=m.get("n_clusters", 100),
        initial_subset=tuple(subset) if subset is not None else None,
        truncation_factor=m.get("truncation_factor", 5.0),
        fallback_rcond=m.get("fallback_rcond", 1e-8),
        fallback_cost_multiplier=m.get("fallback_cost_multiplier", 150.0),
        cost_setup=m.get("cost_setup", 0.1),
        cost_data=m.get("cost_data", 0.5),
        cost_per_triple=m.get("cost_per_triple", 0.05),
    )


def resolve_epsilon(cfg, record=None) -> float:
    if "epsilon" in cfg:
        return float(cfg["epsilon"])
    if record is None:
        pilot = _pilot_dir(cfg)
        if not os.path.isdir(pilot):
            raise CliError(
                "target_acceptances needs a pilot run first: run the pilot command"
            )
        record = load_pilot_record(pilot)
    return record.epsilon_for_acceptances(int(cfg["target_acceptances"]))


# ---------------------------------------------------------------------------
# commands


def cmd_simulate_data(cfg, force: bool = False) -> None:
    m = cfg["model"]
    data_dir = _data_dir(cfg)
    os.makedirs(data_dir, exist_ok=True)
    rng = stream(cfg["base_seed"], 0, DATA_SLOT)
    if m["id"] == "sir":
        target = os.path.join(data_dir, "observed.json")
        if os.path.exists(target) and not force:
            raise CliError(f"{target} exists; pass --force to overwrite")
        config = sir.SirConfig(
            population=m.get("population", 100_000),
            initial_infected=m.get("initial_infected", 1_000),
            initial_recovered=m.get("initial_recovered", 0),
            checkpoint_transitions=m.get("checkpoint_transitions", 1_000),
            subsample_size=m.get("subsample_size", 100),
        )
        y_obs = sir.simulate_observation(config, float(m["true_r0"]), rng)
        with open(target, "w") as fh:
            json.dump({"y_obs": y_obs}, fh)
            fh.write("\n")
        provenance = {"true_r0": m["true_r0"], "base_seed": cfg["base_seed"]}
    elif m["id"] == "extremes":
        target = os.path.join(data_dir, "data.csv")
        if os.path.exists(target) and not force:
            raise CliError(f"{target} exists; pass --force to overwrite")
        loc_rng, data_rng, margin_rng = rng.spawn(3)
        if "locations" in m:
            locations = np.asarray(m["locations"], dtype=float)
        else:
            locations = _integer_locations(m["n_locations"], loc_rng)
        config = _extremes_config(m, locations)
        c, nu = float(m["true_range"]), float(m["true_smoothness"])
        data = ext.schlather_simulate(c, nu, config, data_rng)
        np.savetxt(target, data, delimiter=",", fmt="%.17g")
        np.savetxt(
            os.path.join(data_dir, "locations.csv"), locations, delimiter=",", fmt="%.17g"
        )
        report = ext.frechet_margin_report(data)
        single = ext.SchlatherConfig(
            locations=np.array([[0.0, 0.0], [100.0, 0.0], [0.0, 100.0]]),
            n_years=10_000,
            n_clusters=1,
        )
        ref = ext.schlather_simulate(c, nu, single, margin_rng)[:, 0]
        report["reference_p_le_1"] = float((ref <= 1.0).mean())
        report["reference_target"] = math.exp(-1.0)
        with open(os.path.join(data_dir, "margins.json"), "w") as fh:
            json.dump(report, fh, indent=2)
            fh.write("\n")
        provenance = {
            "true_range": c,
            "true_smoothness": nu,
            "base_seed": cfg["base_seed"],
        }
    else:
        raise CliError(f"unknown model id {m['id']!r}")
    with open(os.path.join(data_dir, "provenance.json"), "w") as fh:
        json.dump(provenance, fh, indent=2)
        fh.write("\n")
    print(f"wrote observed data under {data_dir}")


def cmd_pilot(cfg) -> None:
    model, _ = build_model(cfg)
    densities = build_densities(cfg)
    epsilon = float(cfg["epsilon"]) if "epsilon" in cfg else math.inf
    sset, record = run_pilot(
        densities,
        model,
        cfg["n_pilot"],
        cfg["base_seed"] + PILOT_SEED_OFFSET,
        epsilon=epsilon,
        workers=cfg["workers"],
        cost_mode=cfg["cost_mode"],
    )
    pilot = _pilot_dir(cfg)
    save_sample_set(sset, pilot)
    save_pilot_record(record, pilot)
    reporting.write_scatter_csv(
        record.phi[f"cp{record.n_checkpoints - 1}"],
        record.distance,
        os.path.join(pilot, "phi_vs_distance.csv"),
    )
    print(f"pilot of {cfg['n_pilot']} iterations written to {pilot}")


def _model_gamma_hooks(cfg, config) -> dict:
    if cfg["model"]["id"] == "sir":
        return {
            "method": "binomial-summary",
            "trials": config.subsample_size,
            "observed": config.observed_count,
        }
    include_u = cfg.get("proposal", {"kind": "prior"})["kind"] != "prior"
    return {"method": "boxcox", "include_log_u": include_u}


def cmd_tune(cfg) -> None:
    pilot = _pilot_dir(cfg)
    if not os.path.isdir(pilot):
        raise CliError("tuning needs a pilot run first: run the pilot command")
    record = load_pilot_record(pilot)
    model, config = build_model(cfg)
    tuning_cfg = cfg.get("tuning", {})
    mode = tuning_cfg.get("mode", "standard")
    epsilon = resolve_epsilon(cfg, record)
    default_key = f"cp{record.n_checkpoints - 1}"
    phi_key = tuning_cfg.get("phi_key", default_key)
    floor = tuning_cfg.get("alpha_floor", 1e-3)
    if mode == "none":
        raise CliError("tuning mode 'none' has nothing to tune; run the run command")
    if mode == "ad-hoc":
        table = [(float(t), float(a)) for t, a in tuning_cfg["table"]]
        at_k = record.checkpoint_of(phi_key)
        spec = []
        for k in range(record.n_checkpoints):
            if k == at_k:
                spec.append(
                    {"kind": "table", "entries": table,
                     "default": tuning_cfg.get("default", 1.0)}
                )
            else:
                spec.append({"kind": "constant", "value": 1.0})
        report = TuningReport(
            chosen={"kind": "phi-key", "key": phi_key},
            lambda_star=None,
            score=float("nan"),
            relative=float("nan"),
            w2_hat=float("nan"),
            t_hat=float("nan"),
            recommendation="lazy",
            table=[],
            policy=None,
            policy_spec=spec,
            curves={},
            alpha_floor=floor,
            gamma_mode="ad-hoc",
            epsilon=epsilon,
        )
    elif mode in ("standard", "conservative"):
        eps1 = None
        if mode == "conservative":
            eps1 = record.epsilon_for_acceptances(
                int(tuning_cfg.get("epsilon1_acceptances", 30))
            )
        if tuning_cfg.get("backwards_selection"):
            if cfg["model"]["id"] != "extremes":
                raise CliError("backwards selection applies to the extremes model")
            data_dir = _data_dir(cfg)
            observed = np.loadtxt(os.path.join(data_dir, "data.csv"), delimiter=",")
            ctx = ext.build_context(config, observed)
            coeffs = record.aux["triple_coeffs"]
            fallback = record.phi["cp0"]
            search = LocationSearch(
                full_set=tuple(range(config.n_locations)),
                candidate=lambda subset: ext.subset_candidate(
                    ctx, coeffs, fallback, subset
                ),
            )
            report = select_configuration(
                record,
                (),
                search,
                epsilon=epsilon,
                gamma_mode=mode,
                gamma_hooks=_model_gamma_hooks(cfg, config),
                epsilon1=eps1,
                alpha_floor=floor,
            )
        else:
            report = tune_single(
                record,
                phi_key,
                epsilon,
                gamma_mode=mode,
                gamma_hooks=_model_gamma_hooks(cfg, config),
                epsilon1=eps1,
                min_acceptances=tuning_cfg.get("min_acceptances", 30),
                t2_mode=tuning_cfg.get("t2_mode", "constant"),
                alpha_floor=floor,
            )
    elif mode == "discrete-multistop":
        keys = tuning_cfg.get(
            "phi_keys", [f"cp{k}" for k in range(record.n_checkpoints)]
        )
        policy = tune_discrete_multistop(record, keys, epsilon, alpha_floor=floor)
        report = _report_from_multistop(policy, record, epsilon, floor, mode)
    elif mode == "one-continuous-multistop":
        discrete = tuning_cfg.get(
            "discrete_phi_keys", [f"cp{k}" for k in range(record.n_checkpoints - 1)]
        )
        policy = tune_one_continuous_multistop(
            record, phi_key, discrete, epsilon, alpha_floor=floor
        )
        report = _report_from_multistop(policy, record, epsilon, floor, mode)
    else:
        raise CliError(f"unknown tuning mode {mode!r}")
    report.to_json(_tune_path(cfg))
    print(
        f"tuning report written to {_tune_path(cfg)} "
        f"(recommendation: {report.recommendation})"
    )


def _report_from_multistop(policy, record, epsilon, floor, mode) -> TuningReport:
    spec = []
    for k in range(len(policy.checkpoint_fns)):
        key = policy.phi_keys[k]
        vals = np.unique(np.asarray(record.phi[key], dtype=float))
        if len(vals) <= 16:
            alphas = [policy.alpha(k, np.array([v]), 1.0,
                      tuple(np.array([record.phi[policy.phi_keys[j]][0]])
                            for j in range(k)))
                      for v in vals]
            spec.append(
                {"kind": "levels", "levels": vals.tolist(), "alphas": alphas}
            )
        else:
            grid = np.linspace(float(vals.min()), float(vals.max()), 257)
            base = [
                float(policy.checkpoint_fns[k](np.array([x]), 1.0,
                      tuple(np.array([record.phi[policy.phi_keys[j]][0]])
                            for j in range(k))))
                for x in grid
            ]
            spec.append(
                {"kind": "grid", "phi": grid.tolist(), "base": base, "use_u": True}
            )
    score = policy.meta.get("score", float("nan"))
    return TuningReport(
        chosen={"kind": "multistop", "keys": list(policy.phi_keys)},
        lambda_star=(policy.lambdas[0] if policy.lambdas else None),
        score=score,
        relative=float("nan"),
        w2_hat=float("nan"),
        t_hat=float("nan"),
        recommendation="lazy",
        table=[],
        policy=policy,
        policy_spec=spec,
        curves={},
        alpha_floor=floor,
        gamma_mode=mode,
        epsilon=epsilon,
    )


def cmd_run(cfg, name: str | None = None) -> None:
    model, _ = build_model(cfg)
    densities = build_densities(cfg)
    mode = cfg.get("tuning", {}).get("mode", "none")
    if mode == "none":
        epsilon = resolve_epsilon(cfg)
        name = name or "standard"
        sset = run_abc_is(
            densities,
            cfg["n_main"],
            model,
            epsilon,
            cfg["base_seed"],
            workers=cfg["workers"],
            cost_mode=cfg["cost_mode"],
        )
    else:
        tune_path = _tune_path(cfg)
        if not os.path.exists(tune_path):
            raise CliError("lazy runs need a tuning report: run the tune command")
        report = TuningReport.from_json(tune_path)
        if report.recommendation == "standard-abc":
            raise CliError(
                "tuning recommends the standard algorithm; set tuning mode to "
                "'none' or adjust the candidates"
            )
        epsilon = report.epsilon
        name = name or f"lazy-{mode}"
        sset = run_lazy_abc(
            densities,
            cfg["n_main"],
            model,
            epsilon,
            report.policy,
            cfg["base_seed"],
            workers=cfg["workers"],
            cost_mode=cfg["cost_mode"],
        )
    run_dir = os.path.join(cfg["output_dir"], name)
    save_sample_set(sset, run_dir)
    if os.path.exists(_tune_path(cfg)) and mode != "none":
        with open(_tune_path(cfg)) as src, open(
            os.path.join(run_dir, "tuning_report.json"), "w"
        ) as dst:
            dst.write(src.read())
    if cfg.get("combine_pilot"):
        pilot_set = load_sample_set(_pilot_dir(cfg))
        pilot_at_eps = posthoc_epsilon(pilot_set, epsilon)
        combined = combine(pilot_at_eps, sset)
        save_sample_set(combined, run_dir + "-combined")
    print(f"run written to {run_dir} (epsilon={epsilon:.6g})")


def cmd_posthoc(run_dir: str, out_dir: str, new_epsilon=None, target=None) -> None:
    sset = load_sample_set(run_dir)
    if (new_epsilon is None) == (target is None):
        raise CliError("pass exactly one of --epsilon and --target-acceptances")
    if new_epsilon is not None:
        updated = posthoc_epsilon(sset, float(new_epsilon))
    else:
        updated = posthoc_target_acceptances(sset, int(target))
    save_sample_set(updated, out_dir)
    print(f"re-thresholded run written to {out_dir} (epsilon={updated.epsilon:.6g})")


def cmd_combine(pilot_dir: str, main_dir: str, out_dir: str) -> None:
    pilot_set = load_sample_set(pilot_dir)
    main_set = load_sample_set(main_dir)
    if pilot_set.epsilon > main_set.epsilon:
        pilot_set = posthoc_epsilon(pilot_set, main_set.epsilon)
    save_sample_set(combine(pilot_set, main_set), out_dir)
    print(f"combined set written to {out_dir}")


def cmd_report(run_dirs: list[str], out_dir: str) -> None:
    rows = reporting.report_runs(run_dirs, out_dir)
    with open(os.path.join(out_dir, "comparison.txt")) as fh:
        print(fh.read())
    print(f"report written to {out_dir} ({len(rows)} runs)")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lazyabc", description="ABC importance sampling with early stopping"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument("--seed", type=int, help="override base_seed")
        p.add_argument("--workers", type=int, help="override worker count")
        p.add_argument("--cost-mode", choices=("wall", "cpu", "sim"), dest="cost_mode")

    p = sub.add_parser("simulate-data", help="write an observed dataset")
    add_config(p)
    p.add_argument("--force", action="store_true", help="overwrite existing data")

    p = sub.add_parser("pilot", help="run the pilot and record statistics")
    add_config(p)

    p = sub.add_parser("tune", help="build a continuation-probability policy")
    add_config(p)

    p = sub.add_parser("run", help="run the main algorithm")
    add_config(p)
    p.add_argument("--name", help="run directory name")

    p = sub.add_parser("posthoc-epsilon", help="re-threshold a finished run")
    p.add_argument("run_dir")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--target-acceptances", type=int, dest="target")
    p.add_argument("--out", required=True)

    p = sub.add_parser("combine", help="append a pilot run to a main run")
    p.add_argument("pilot_dir")
    p.add_argument("main_dir")
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="tabulate finished runs")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate-data":
            cfg = load_config(args.config, args)
            with RunLock(cfg["output_dir"]):
                cmd_simulate_data(cfg, force=args.force)
        elif args.command == "pilot":
            cfg = load_config(args.config, args)
            with RunLock(cfg["output_dir"]):
                cmd_pilot(cfg)
        elif args.command == "tune":
            cfg = load_config(args.config, args)
            with RunLock(cfg["output_dir"]):
                cmd_tune(cfg)
        elif args.command == "run":
            cfg = load_config(args.config, args)
            with RunLock(cfg["output_dir"]):
                cmd_run(cfg, name=args.name)
        elif args.command == "posthoc-epsilon":
            cmd_posthoc(args.run_dir, args.out, args.epsilon, args.target)
        elif args.command == "combine":
            cmd_combine(args.pilot_dir, args.main_dir, args.out)
        elif args.command == "report":
            cmd_report(args.run_dirs, args.out)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
