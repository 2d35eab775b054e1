"""Configuration-driven entry point.

Subcommands mirror the offline-then-online split of the method:

* moments -- estimate population moments from historical covariate draws
  and cache them as JSON
* train   -- fit the design policies referenced by the config
* bench   -- run the replication benchmark for every (design, N) cell and
  emit a CSV report

Configs are TOML; see README for the schema. Exit codes: 0 success,
2 config error, 3 numerical failure, 4 partial benchmark failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import pathlib
import sys
from dataclasses import dataclass, field

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import __version__
from .baselines import BASELINE_NAMES, BaselineKind
from .designer_bandit import (
    BanditPolicyDesign,
    DgpCovariates,
    load_policy,
    sample_behavior_actions,
    save_policy,
    train_policy,
)
from .designer_dynamic import (
    DynamicPolicyDesign,
    estimate_design_priors,
    load_hierarchical,
    save_hierarchical,
    train_hierarchical,
)
from .errors import ConfigError, RobdesignError
from .sieve import SieveBasis, estimate_moments, PopulationMoments
from .sim import (
    BanditDgp,
    BaselineDesign,
    DynamicDgp,
    make_bootstrap_fit,
    run_dynamic_experiment,
    run_experiment,
)
from .valuenet import TrainConfig

KNOWN_DESIGNS = ("RSD", "NRD") + BASELINE_NAMES
BANDIT_SETTINGS = ("bandit_additive", "bandit_interactive")


@dataclass
class ExperimentConfig:
    setting: str
    seed: int
    replications: int
    n_values: list
    designs: list
    out_dir: str = "out"
    dgp_variant: str = "setup1"
    misspec: str = "paper_mu"
    sigma2: float = 1.0
    intervals: int = 6
    delta: float = 3.0
    basis_terms: list = field(default_factory=list)
    basis_clamp: list = field(default_factory=list)
    historical_draws: int = 50_000
    nu2: float = 0.005
    rollouts: int = 8000  # bandit stage rollout count
    mc_draws: int = 5000  # bandit Monte Carlo next-step draws
    rollouts_rl: int = 20_000  # dynamic per-epoch rollouts
    epochs_rl: int = 300  # dynamic epochs per day
    eta_t: float = 1.0
    prior_rollouts: int = 4000
    hidden: list = field(default_factory=lambda: [48, 32])
    activation: str = "swish"
    dropout: list = field(default_factory=list)
    batch_norm: bool = False
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 200
    patience: int = 20
    efficiency: bool = False

    def validate(self) -> None:
        if self.setting not in BANDIT_SETTINGS + ("dynamic",):
            raise ConfigError(f"experiment.setting: unknown value {self.setting!r}")
        for d in self.designs:
            if d not in KNOWN_DESIGNS:
                raise ConfigError(f"experiment.designs: unknown design {d!r}")
        if not self.n_values:
            raise ConfigError("experiment.n_values: must be non-empty")
        if self.setting == "bandit_interactive":
            basis = self.basis()
            min_n = 3 + basis.dim + 2
            if min(self.n_values) < min_n:
                raise ConfigError(
                    f"experiment.n_values: interactive OLS needs N >= p+L+2 = {min_n}"
                )

    def basis(self) -> SieveBasis:
        if self.basis_terms:
            return SieveBasis(
                terms=tuple(tuple(t) for t in self.basis_terms),
                clamp=tuple(tuple(c) for c in self.basis_clamp),
            )
        if self.setting == "dynamic":
            return SieveBasis.dynamic_default()
        return SieveBasis.bandit_default()

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            batch_size=self.batch_size,
            epochs=self.epochs,
            patience=self.patience,
            target_transform="log",
        )

    def bandit_dgp(self) -> BanditDgp:
        if self.dgp_variant == "setup1":
            return BanditDgp.setup1(misspec=self.misspec)
        if self.dgp_variant == "setup2":
            return BanditDgp.setup2(misspec=self.misspec)
        if self.dgp_variant == "bootstrap":
            fit = make_bootstrap_fit(np.random.default_rng(self.seed))
            return BanditDgp.from_bootstrap(
                fit, interactive=self.setting == "bandit_interactive"
            )
        raise ConfigError(f"dgp.variant: unknown value {self.dgp_variant!r}")

    def dynamic_dgp(self) -> DynamicDgp:
        rng = np.random.default_rng(np.random.SeedSequence((self.seed, 0xD9)))
        return DynamicDgp.draw(rng, self.intervals, self.delta)


def _require(table: dict, section: str, key: str):
    if section not in table:
        raise ConfigError(f"missing section [{section}]")
    if key not in table[section]:
        raise ConfigError(f"missing field {section}.{key}")
    return table[section][key]


def load_config(path, seed_override: int | None = None, out_override: str | None = None) -> ExperimentConfig:
    p = pathlib.Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        with open(p, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML parse error in {p}: {exc}") from exc
    exp = {
        "setting": _require(raw, "experiment", "setting"),
        "seed": int(_require(raw, "experiment", "seed")),
        "replications": int(_require(raw, "experiment", "replications")),
        "n_values": list(_require(raw, "experiment", "n_values")),
        "designs": list(_require(raw, "experiment", "designs")),
    }
    cfg = ExperimentConfig(**exp)
    cfg.out_dir = raw.get("experiment", {}).get("out_dir", cfg.out_dir)
    dgp = raw.get("dgp", {})
    cfg.dgp_variant = dgp.get("variant", "dynamic_mdp" if cfg.setting == "dynamic" else "setup1")
    cfg.misspec = dgp.get("misspec", cfg.misspec)
    cfg.sigma2 = float(dgp.get("sigma2", cfg.sigma2))
    cfg.intervals = int(dgp.get("t_intervals", cfg.intervals))
    cfg.delta = float(dgp.get("delta", cfg.delta))
    basis = raw.get("basis", {})
    cfg.basis_terms = basis.get("terms", [])
    cfg.basis_clamp = basis.get("clamp", [])
    moments = raw.get("moments", {})
    cfg.historical_draws = int(moments.get("historical_draws", cfg.historical_draws))
    cfg.nu2 = float(moments.get("nu2", cfg.nu2))
    training = raw.get("training", {})
    for key in (
        "rollouts",
        "mc_draws",
        "rollouts_rl",
        "epochs_rl",
        "prior_rollouts",
        "batch_size",
        "epochs",
        "patience",
    ):
        if key in training:
            setattr(cfg, key, int(training[key]))
    for key in ("lr", "eta_t"):
        if key in training:
            setattr(cfg, key, float(training[key]))
    if "hidden" in training:
        cfg.hidden = [int(h) for h in training["hidden"]]
    if "activation" in training:
        cfg.activation = str(training["activation"])
    if "dropout" in training:
        cfg.dropout = [float(r) for r in training["dropout"]]
    if "batch_norm" in training:
        cfg.batch_norm = bool(training["batch_norm"])
    cfg.efficiency = bool(raw.get("report", {}).get("efficiency", False))
    if seed_override is not None:
        cfg.seed = seed_override
    if out_override is not None:
        cfg.out_dir = out_override
    cfg.validate()
    return cfg


def _config_hash(path) -> str:
    return hashlib.sha256(pathlib.Path(path).read_bytes()).hexdigest()


def _write_manifest(cfg: ExperimentConfig, config_path, out: pathlib.Path, command: str, threads: int):
    manifest = {
        "command": command,
        "config_sha256": _config_hash(config_path),
        "seed": cfg.seed,
        "threads": threads,
        "version": __version__,
    }
    (out / f"{command}_manifest.json").write_text(json.dumps(manifest, sort_keys=True))


def _moments_path(cfg: ExperimentConfig) -> pathlib.Path:
    return pathlib.Path(cfg.out_dir) / "moments.json"


def cmd_moments(cfg: ExperimentConfig, config_path, threads: int) -> int:
    if cfg.setting == "dynamic":
        raise ConfigError("experiment.setting: moments caching applies to bandit settings")
    out = pathlib.Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dgp = cfg.bandit_dgp()
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x30)))
    draws = dgp.draw_covariates(rng, cfg.historical_draws)
    pm = estimate_moments(cfg.basis(), draws, cfg.nu2)
    _moments_path(cfg).write_text(pm.to_json())
    cond = float(np.linalg.cond(pm.sigma))
    print(f"moments written to {_moments_path(cfg)} (sigma condition number {cond:.4g})")
    _write_manifest(cfg, config_path, out, "moments", threads)
    return 0


def _policy_dir(cfg: ExperimentConfig, design: str, n: int) -> pathlib.Path:
    return pathlib.Path(cfg.out_dir) / "policies" / f"{cfg.setting}_{design}_N{n}"


def _train_bandit_policy(cfg: ExperimentConfig, design: str, n: int, pm, log_lines: list):
    setting = "interactive" if cfg.setting == "bandit_interactive" else "additive"
    dgp = cfg.bandit_dgp()
    policy = train_policy(
        setting,
        n,
        pm,
        cfg.basis(),
        DgpCovariates(dgp),
        sample_behavior_actions,
        cfg.rollouts,
        cfg.mc_draws,
        cfg.train_config(),
        seed=int(np.random.SeedSequence((cfg.seed, design == "NRD", n)).generate_state(1)[0]),
        net_hidden=tuple(cfg.hidden),
        net_activation=cfg.activation,
        net_dropout=tuple(cfg.dropout),
        net_batch_norm=cfg.batch_norm,
        sigma2=cfg.sigma2,
    )
    for entry in policy.train_log:
        log_lines.append({"design": design, "n": n, **entry})
    return policy


def _bandit_moments(cfg: ExperimentConfig, nu2: float) -> PopulationMoments:
    path = _moments_path(cfg)
    if not path.exists():
        raise ConfigError(f"moments file missing at {path}; run the moments command first")
    pm = PopulationMoments.from_json(path.read_text())
    if pm.nu2 != nu2:
        pm = PopulationMoments(
            sigma=pm.sigma, xi=pm.xi, u_basis=pm.u_basis, mean_x=pm.mean_x, nu2=nu2
        )
    return pm


def cmd_train(cfg: ExperimentConfig, config_path, threads: int) -> int:
    out = pathlib.Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_lines: list = []
    if cfg.setting in BANDIT_SETTINGS:
        for design in ("RSD", "NRD"):
            if design not in cfg.designs:
                continue
            pm = _bandit_moments(cfg, cfg.nu2 if design == "RSD" else 0.0)
            for n in cfg.n_values:
                policy = _train_bandit_policy(cfg, design, n, pm, log_lines)
                target = _policy_dir(cfg, design, n)
                save_policy(policy, target)
                manifest = json.loads((target / "manifest.json").read_text())
                manifest["design"] = design
                (target / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
                print(f"trained {design} N={n} -> {target}")
    else:
        dgp = cfg.dynamic_dgp()
        basis = cfg.basis()
        for design in ("RSD", "NRD"):
            if design not in cfg.designs:
                continue
            eta = cfg.eta_t if design == "RSD" else 0.0
            bundle = estimate_design_priors(
                dgp, basis, max(cfg.n_values), cfg.prior_rollouts,
                seed=cfg.seed, eta_t=eta,
            )
            for n in cfg.n_values:
                policy = train_hierarchical(
                    dgp,
                    bundle.priors,
                    n,
                    cfg.intervals,
                    cfg.epochs_rl,
                    cfg.rollouts_rl,
                    cfg.train_config(),
                    seed=int(np.random.SeedSequence((cfg.seed, design == "NRD", n, 1)).generate_state(1)[0]),
                    basis=basis,
                    net_hidden=tuple(cfg.hidden),
                )
                for day in policy.days:
                    for entry in day.train_log:
                        log_lines.append({"design": design, "n": n, "day": day.day_index, **entry})
                target = _policy_dir(cfg, design, n)
                save_hierarchical(policy, target, bundle)
                print(f"trained {design} N={n} -> {target}")
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as fh:
        for line in log_lines:
            fh.write(json.dumps(line, sort_keys=True) + "\n")
    _write_manifest(cfg, config_path, out, "train", threads)
    return 0


def _format_float(v: float) -> str:
    if isinstance(v, float) and not np.isfinite(v):
        return "nan"
    return repr(float(v))


def _bandit_design(cfg: ExperimentConfig, name: str, n: int, log_lines: list):
    if name in BASELINE_NAMES:
        return BaselineDesign(BaselineKind(name))
    target = _policy_dir(cfg, name, n)
    if target.exists():
        return BanditPolicyDesign(load_policy(target), name)
    pm = _bandit_moments(cfg, cfg.nu2 if name == "RSD" else 0.0)
    policy = _train_bandit_policy(cfg, name, n, pm, log_lines)
    save_policy(policy, target)
    return BanditPolicyDesign(policy, name)


def cmd_bench(cfg: ExperimentConfig, config_path, threads: int, verbose: bool) -> int:
    out = pathlib.Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_lines: list = []
    reports = {}
    any_failure = False
    if cfg.setting in BANDIT_SETTINGS:
        dgp = cfg.bandit_dgp()
        for design_name in cfg.designs:
            for n in cfg.n_values:
                design = _bandit_design(cfg, design_name, n, log_lines)
                report = run_experiment(
                    design, dgp, n, cfg.replications, cfg.seed, threads=threads
                )
                reports[(design_name, n)] = report
                any_failure |= report.failures > 0
    else:
        dgp = cfg.dynamic_dgp()
        basis = cfg.basis()
        bundle = None
        truth = dgp.true_ate(seed=cfg.seed)
        for design_name in cfg.designs:
            for n in cfg.n_values:
                if design_name in BASELINE_NAMES:
                    design = BaselineDesign(BaselineKind(design_name))
                    if bundle is None:
                        bundle = estimate_design_priors(
                            dgp, basis, n, cfg.prior_rollouts, seed=cfg.seed, eta_t=cfg.eta_t
                        )
                else:
                    target = _policy_dir(cfg, design_name, n)
                    if not target.exists():
                        raise ConfigError(
                            f"policy for {design_name} N={n} missing at {target}; run train first"
                        )
                    policy, bundle_loaded = load_hierarchical(target)
                    bundle = bundle_loaded or bundle
                    design = DynamicPolicyDesign(policy, design_name)
                report = run_dynamic_experiment(
                    design, dgp, n, cfg.replications, cfg.seed,
                    bundle.mean_pos, bundle.mean_neg, true_ate=truth, threads=threads,
                )
                reports[(design_name, n)] = report
                any_failure |= report.failures > 0

    headers = ["design", "setting", "N", "T", "delta", "replications", "mse", "ci_half", "failures"]
    efficiency = cfg.efficiency and "NRD" in cfg.designs
    if efficiency:
        headers.append("eff")
    rows = []
    for design_name in cfg.designs:
        for n in sorted(cfg.n_values):
            rep = reports[(design_name, n)]
            t_val = cfg.intervals if cfg.setting == "dynamic" else 1
            d_val = cfg.delta if cfg.setting == "dynamic" else 0.0
            row = [
                design_name,
                cfg.setting,
                str(n),
                str(t_val),
                _format_float(d_val),
                str(rep.replications),
                _format_float(rep.mse),
                _format_float(rep.ci_half),
                str(rep.failures),
            ]
            if efficiency:
                nrd = reports[("NRD", n)]
                row.append(_format_float(nrd.mse / rep.mse))
            rows.append(row)
    csv_path = out / "bench.csv"
    with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(headers) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")
    print(f"wrote {csv_path}")
    print(",".join(headers))
    for row in rows:
        print(",".join(row))
    if verbose:
        with open(out / "replications.jsonl", "w", encoding="utf-8") as fh:
            for design_name in cfg.designs:
                for n in sorted(cfg.n_values):
                    for record in reports[(design_name, n)].records:
                        fh.write(record.to_json() + "\n")
    _write_manifest(cfg, config_path, out, "bench", threads)
    return 4 if any_failure else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="robdesign", description=__doc__)
    parser.add_argument("command", choices=["moments", "train", "bench"])
    parser.add_argument("--config", required=True)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None)
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument("--verbose", action="store_true")
    args = parser.parse_args(argv)
    threads = args.threads
    if threads is None:
        threads = int(os.environ.get("ROBDESIGN_THREADS", "1"))
    try:
        cfg = load_config(args.config, seed_override=args.seed, out_override=args.out)
        if args.command == "moments":
            return cmd_moments(cfg, args.config, threads)
        if args.command == "train":
            return cmd_train(cfg, args.config, threads)
        return cmd_bench(cfg, args.config, threads, args.verbose)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except RobdesignError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
