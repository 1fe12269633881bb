"""Command line front end.

Four modes share one configuration surface:

* ``simulate`` writes a synthetic dataset CSV,
* ``oracle`` writes brute-force ground-truth effects as JSON,
* ``analyze`` estimates SDE/SIE per group plus sensitivity bounds at a
  single r2 value,
* ``sweep`` produces the full sensitivity curve (CSV + results JSON).

Configuration comes from an optional JSON file plus flag overrides; flags
win.  All outputs are deterministic given the seed, so reruns are
byte-identical.
"""

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .dgp import (Mechanism, MissingnessSpec, ObservationTable,
                  StructuralParams, apply_missingness, generate,
                  oracle_effects)
from .errors import (ConfigurationError, DataValidationError, EstimationError,
                     MedtransportError, SchemaError)
from .nuisance import fit_nuisances
from .sensitivity import (BOOTSTRAP_N_MC, DEFAULT_TRUNCATION_QUANTILE,
                          SensitivityConfig, bounded_sie, ci_alpha, sweep)
from .tmle import estimate_sde, estimate_sie

log = logging.getLogger("medtransport")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_ESTIMATION = 4

REQUIRED_COLUMNS = ("S", "A", "W", "R", "C", "Y")
BINARY_COLUMNS = ("S", "A", "W", "Y")
MIN_STRATUM_WARN = 50
MIN_STRATUM_ERROR = 10
CURVE_COLUMNS = ("group_w", "r2", "sie_lower", "sie_upper",
                 "ci_low", "ci_high", "contains_null")


@dataclasses.dataclass
class RunConfig:
    """Everything one invocation needs; echoed verbatim into the results."""

    mode: str = "analyze"
    seed: int = 0
    params: StructuralParams = dataclasses.field(default_factory=StructuralParams)
    missingness: tuple = ()
    sensitivity: SensitivityConfig = dataclasses.field(
        default_factory=SensitivityConfig)
    ridge: float = 0.0
    truncation_quantile: float = DEFAULT_TRUNCATION_QUANTILE
    n_mc: int = 1000
    mediator_binary: bool = False
    n_source: int = 5000
    n_target: int = 5000
    oracle_n_mc: int = 10**6
    input_path: str = None
    out_dir: str = "."
    keep_truth: bool = False

    def validate(self):
        if self.mode not in ("simulate", "analyze", "sweep", "oracle"):
            raise ConfigurationError(f"unknown mode: {self.mode}")
        self.params.validate()
        for spec in self.missingness:
            spec.validate()
        self.sensitivity.validate()
        if not 0.5 < self.truncation_quantile <= 1.0:
            raise ConfigurationError(
                f"truncation_quantile must lie in (0.5, 1], got {self.truncation_quantile}")
        if self.n_source < 1 or self.n_target < 1:
            raise ConfigurationError("sample sizes must be positive")
        if self.n_mc < 10:
            raise ConfigurationError("n_mc must be at least 10")
        if self.input_path is not None and not Path(self.input_path).exists():
            raise ConfigurationError(f"input file does not exist: {self.input_path}")

    def as_dict(self):
        return {
            "mode": self.mode,
            "seed": self.seed,
            "dgp": dataclasses.asdict(self.params),
            "missingness": [
                {"mechanism": spec.mechanism.value, "lam": spec.lam,
                 "target_group": spec.target_group,
                 "target_proportion": spec.target_proportion}
                for spec in self.missingness
            ],
            "sensitivity": {
                "r2_grid": list(self.sensitivity.r2_grid),
                "lam": self.sensitivity.lam,
                "alpha": self.sensitivity.alpha,
                "n_bootstrap": self.sensitivity.n_bootstrap,
                "seed": self.sensitivity.seed,
            },
            "nuisance": {
                "ridge": self.ridge,
                "truncation_quantile": self.truncation_quantile,
                "n_mc": self.n_mc,
                "mediator_binary": self.mediator_binary,
            },
            "samples": {"n_source": self.n_source, "n_target": self.n_target},
            "oracle_n_mc": self.oracle_n_mc,
            "input": self.input_path,
            "out_dir": self.out_dir,
            "keep_truth": self.keep_truth,
        }


def _spec_from_dict(raw):
    try:
        mechanism = Mechanism(str(raw.get("mechanism", "mnar")).lower())
    except ValueError:
        raise ConfigurationError(
            f"unknown missingness mechanism: {raw.get('mechanism')}") from None
    return MissingnessSpec(
        mechanism=mechanism,
        lam=float(raw.get("lam", MissingnessSpec.lam)),
        target_group=raw.get("target_group", MissingnessSpec.target_group),
        target_proportion=raw.get("target_proportion"),
    )


def parse_missingness(text, target_group=0):
    """Parse a ``mechanism:p1[,p2,...][:lam]`` flag into missingness specs."""
    parts = text.split(":")
    if len(parts) not in (2, 3):
        raise ConfigurationError(
            f"--missingness expects mechanism:proportions[:lam], got {text!r}")
    try:
        mechanism = Mechanism(parts[0].lower())
    except ValueError:
        raise ConfigurationError(f"unknown missingness mechanism: {parts[0]!r}") from None
    try:
        proportions = [float(v) for v in parts[1].split(",")]
        lam = float(parts[2]) if len(parts) == 3 else MissingnessSpec.lam
    except ValueError:
        raise ConfigurationError(f"malformed --missingness value: {text!r}") from None
    return tuple(
        MissingnessSpec(mechanism=mechanism, lam=lam, target_group=target_group,
                        target_proportion=p)
        for p in proportions
    )


def build_config(args) -> RunConfig:
    """Merge the JSON config file (if any) with flag overrides; flags win."""
    raw = {}
    if args.config is not None:
        path = Path(args.config)
        if not path.exists():
            raise ConfigurationError(f"config file does not exist: {args.config}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            raise ConfigurationError(f"config file is not valid JSON: {err}") from err
        if not isinstance(raw, dict):
            raise ConfigurationError("config file must contain a JSON object")

    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))

    try:
        params = StructuralParams(**raw.get("dgp", {}))
    except TypeError as err:
        raise ConfigurationError(f"bad dgp section: {err}") from err

    raw_specs = raw.get("missingness", [])
    if isinstance(raw_specs, dict):
        raw_specs = [raw_specs]
    missingness = tuple(_spec_from_dict(d) for d in raw_specs)

    sens_raw = dict(raw.get("sensitivity", {}))
    if "lambda" in sens_raw:
        sens_raw["lam"] = sens_raw.pop("lambda")
    if "r2_grid" in sens_raw:
        sens_raw["r2_grid"] = tuple(float(v) for v in sens_raw["r2_grid"])
    sens_raw.setdefault("seed", seed)
    try:
        sensitivity = SensitivityConfig(**sens_raw)
    except TypeError as err:
        raise ConfigurationError(f"bad sensitivity section: {err}") from err

    nuis = raw.get("nuisance", {})
    samples = raw.get("samples", {})
    config = RunConfig(
        mode=args.mode if args.mode is not None else raw.get("mode", "analyze"),
        seed=seed,
        params=params,
        missingness=missingness,
        sensitivity=sensitivity,
        ridge=float(nuis.get("ridge", 0.0)),
        truncation_quantile=float(
            nuis.get("truncation_quantile", DEFAULT_TRUNCATION_QUANTILE)),
        n_mc=int(nuis.get("n_mc", 1000)),
        mediator_binary=bool(nuis.get("mediator_binary", False)),
        n_source=int(samples.get("n_source", 5000)),
        n_target=int(samples.get("n_target", 5000)),
        oracle_n_mc=int(raw.get("oracle_n_mc", 10**6)),
        input_path=raw.get("input"),
        out_dir=raw.get("out_dir", "."),
        keep_truth=bool(raw.get("keep_truth", False)),
    )

    target_group = args.target_group if args.target_group is not None else 0
    if args.missingness is not None:
        config = dataclasses.replace(
            config, missingness=parse_missingness(args.missingness, target_group))
    elif args.target_group is not None:
        config = dataclasses.replace(config, missingness=tuple(
            dataclasses.replace(s, target_group=target_group)
            for s in config.missingness))
    sens_updates = {}
    if args.r2_grid is not None:
        try:
            sens_updates["r2_grid"] = tuple(float(v) for v in args.r2_grid.split(","))
        except ValueError:
            raise ConfigurationError(
                f"malformed --r2-grid value: {args.r2_grid!r}") from None
    if args.alpha is not None:
        sens_updates["alpha"] = args.alpha
    if args.bootstrap is not None:
        sens_updates["n_bootstrap"] = args.bootstrap
    if args.seed is not None:
        sens_updates["seed"] = args.seed
    if sens_updates:
        config = dataclasses.replace(
            config, sensitivity=dataclasses.replace(config.sensitivity, **sens_updates))
    if args.n_mc is not None:
        config = dataclasses.replace(config, n_mc=args.n_mc)
    if args.input is not None:
        config = dataclasses.replace(config, input_path=args.input)
    if args.out_dir is not None:
        config = dataclasses.replace(config, out_dir=args.out_dir)
    if args.keep_truth:
        config = dataclasses.replace(config, keep_truth=True)
    config.validate()
    return config


def load_csv(path) -> ObservationTable:
    """Read an external dataset; empty mediator cells become missing rows."""
    try:
        df = pd.read_csv(path)
    except FileNotFoundError:
        raise ConfigurationError(f"input file does not exist: {path}") from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as err:
        raise SchemaError(f"could not parse CSV {path}: {err}") from err

    upper = {c.upper().strip(): c for c in df.columns}
    for name in REQUIRED_COLUMNS:
        if name not in upper:
            raise SchemaError(f"missing required column: {name}")

    def column(name):
        return df[upper[name]]

    for name in ("R", "C"):
        values = pd.to_numeric(column(name), errors="coerce")
        bad = values.isna() & column(name).notna()
        if bad.any():
            line = int(bad.idxmax()) + 2  # header is line 1
            raise DataValidationError(
                f"non-numeric value in column {name} at line {line}")

    binary = {}
    binary_names = BINARY_COLUMNS + (("M",) if "M" in upper else ())
    for name in binary_names:
        values = pd.to_numeric(column(name), errors="coerce")
        bad = ~values.isin((0, 1))
        if bad.any():
            line = int(bad.idxmax()) + 2
            raise DataValidationError(
                f"non-binary value in column {name} at line {line}: "
                f"{column(name).iloc[int(bad.idxmax())]!r}")
        binary[name] = values.to_numpy(dtype=int)

    c = pd.to_numeric(column("C"), errors="coerce").to_numpy(dtype=float)
    if "M" in binary:
        m = binary["M"]
        observed_but_masked = (m == 1) & np.isnan(c)
        if observed_but_masked.any():
            line = int(np.argmax(observed_but_masked)) + 2
            raise DataValidationError(
                f"M=1 but C is empty at line {line}")
        c = np.where(m == 0, np.nan, c)
    else:
        m = (~np.isnan(c)).astype(int)

    ids = (pd.to_numeric(column("ID"), errors="coerce").to_numpy(dtype=int)
           if "ID" in upper else np.arange(len(df)))
    table = ObservationTable(
        ids=ids,
        s=binary["S"], a=binary["A"], w=binary["W"],
        r=pd.to_numeric(column("R"), errors="coerce").to_numpy(dtype=float),
        c_obs=c, m=m, y=binary["Y"],
    )

    for s_val in (0, 1):
        for w_val in (0, 1):
            count = int(((table.s == s_val) & (table.w == w_val)).sum())
            if count < MIN_STRATUM_ERROR:
                raise DataValidationError(
                    f"stratum (S={s_val}, W={w_val}) has only {count} rows; "
                    f"need at least {MIN_STRATUM_ERROR}")
            if count < MIN_STRATUM_WARN:
                log.warning("stratum (S=%d, W=%d) has only %d rows; "
                            "estimates may be unstable", s_val, w_val, count)
    return table


def _effect_dict(effect):
    return {
        "point": effect.point,
        "se": effect.se,
        "ci_low": effect.ci_low,
        "ci_high": effect.ci_high,
        "mean_eic": float(np.mean(effect.eic_values)),
        "epsilons": [float(e) for e in effect.epsilons],
        "n_truncated": int(effect.n_truncated),
    }


@dataclasses.dataclass
class ResultDocument:
    """Self-describing run output; serializes deterministically."""

    config: dict
    versions: dict
    effects: dict = dataclasses.field(default_factory=dict)
    curve: list = dataclasses.field(default_factory=list)
    crossings: dict = dataclasses.field(default_factory=dict)
    diagnostics: dict = dataclasses.field(default_factory=dict)
    oracle: dict = None

    def as_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"


def _versions():
    return {"medtransport": __version__, "numpy": np.__version__,
            "pandas": pd.__version__}


def _obtain_table(config: RunConfig):
    """Input CSV when given, otherwise a fresh simulation; single missingness
    specs are applied up front, sweeps over several are handled later."""
    if config.input_path is not None:
        return load_csv(config.input_path), None
    table = generate(config.params, config.n_source, config.n_target, config.seed)
    realized = None
    if config.mode != "sweep" and config.missingness:
        if len(config.missingness) > 1:
            raise ConfigurationError(
                f"{config.mode} mode accepts a single missingness spec")
        table, realized = _mask(table, config.missingness[0], config.seed)
    return table, realized


def _mask(table, spec, seed):
    masked = apply_missingness(table, spec, seed=seed + 1)
    eligible = (masked.w == spec.target_group if spec.target_group is not None
                else np.ones(masked.n, dtype=bool))
    return masked, float((masked.m[eligible] == 0).mean())


def _fit(config, table, n_mc=None):
    return fit_nuisances(table, mediator_binary=config.mediator_binary,
                         ridge=config.ridge,
                         n_mc=config.n_mc if n_mc is None else n_mc,
                         seed=config.seed)


def run(config: RunConfig) -> ResultDocument:
    """Execute one mode and write its artifacts under ``out_dir``."""
    config.validate()
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = ResultDocument(config=config.as_dict(), versions=_versions())

    if config.mode == "oracle":
        truth = oracle_effects(config.params, config.oracle_n_mc, config.seed)
        doc.oracle = truth.as_dict()
        (out_dir / "oracle.json").write_text(
            json.dumps(doc.oracle, indent=2, sort_keys=True) + "\n")
        (out_dir / "results.json").write_text(doc.to_json())
        return doc

    table, realized = _obtain_table(config)
    if realized is not None:
        doc.diagnostics["realized_missing"] = realized

    if config.mode == "simulate":
        frame = table.to_dataframe(keep_truth=config.keep_truth)
        frame.to_csv(out_dir / "dataset.csv", index=False)
        doc.diagnostics["n_rows"] = int(table.n)
        (out_dir / "results.json").write_text(doc.to_json())
        return doc

    if config.mode == "analyze":
        fit = _fit(config, table)
        r2 = config.sensitivity.r2_grid[0]
        for group in (0, 1):
            sde = estimate_sde(fit, table, group_w=group)
            sie = estimate_sie(fit, table, group_w=group)
            lower, upper = bounded_sie(fit, table, group, r2,
                                       truncation_quantile=config.truncation_quantile)
            ci_low, ci_high = ci_alpha(
                fit, table, group, r2, config.sensitivity,
                truncation_quantile=config.truncation_quantile)
            doc.effects[str(group)] = {
                "SDE": _effect_dict(sde), "SIE": _effect_dict(sie),
                "sensitivity": {
                    "r2": r2,
                    "sie_lower": lower, "sie_upper": upper,
                    "ci_low": min(ci_low, lower),
                    "ci_high": max(ci_high, upper),
                },
            }
        (out_dir / "results.json").write_text(doc.to_json())
        return doc

    # sweep
    if config.missingness and len(config.missingness) > 1:
        grid = list(config.missingness)
    else:
        if config.missingness:
            table, realized = _mask(table, config.missingness[0], config.seed)
            doc.diagnostics["realized_missing"] = realized
        grid = list(config.sensitivity.r2_grid)

    def factory(t):
        return fit_nuisances(t, mediator_binary=config.mediator_binary,
                             ridge=config.ridge,
                             n_mc=min(config.n_mc, BOOTSTRAP_N_MC),
                             seed=config.seed)

    curve, crossings, diagnostics = sweep(
        factory, table, grid, config.sensitivity,
        truncation_quantile=config.truncation_quantile)

    fit = _fit(config, table)
    for group in (0, 1):
        doc.effects[str(group)] = {
            "SDE": _effect_dict(estimate_sde(fit, table, group_w=group)),
            "SIE": _effect_dict(estimate_sie(fit, table, group_w=group)),
        }
    doc.curve = [dataclasses.asdict(row) for row in curve.rows]
    doc.crossings = {str(x.group_w): x.r2_star for x in crossings}
    doc.diagnostics.update(diagnostics)

    frame = curve.to_dataframe()[list(CURVE_COLUMNS)]
    frame.to_csv(out_dir / "curve.csv", index=False)
    (out_dir / "results.json").write_text(doc.to_json())
    return doc


def _parser():
    parser = argparse.ArgumentParser(
        prog="medtransport",
        description="Transported mediation effects with missing-mediator "
                    "sensitivity analysis.")
    parser.add_argument("--mode", choices=("simulate", "analyze", "sweep", "oracle"))
    parser.add_argument("--config", help="JSON config file; flags override it")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--input", help="dataset CSV (columns S,A,W,R,C,Y)")
    parser.add_argument("--out-dir", help="directory for output artifacts")
    parser.add_argument("--r2-grid", help="comma-separated r2 values; "
                                          "analyze mode uses the first")
    parser.add_argument("--missingness",
                        help="mechanism:p1[,p2,...][:lam], e.g. mnar:0.7:-3")
    parser.add_argument("--target-group", type=int, choices=(0, 1))
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--bootstrap", type=int)
    parser.add_argument("--n-mc", type=int)
    parser.add_argument("--keep-truth", action="store_true",
                        help="persist the true mediator column when simulating")
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = _parser().parse_args(argv)
    try:
        run(build_config(args))
    except ConfigurationError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (SchemaError, DataValidationError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except EstimationError as err:
        print(f"estimation error: {err}", file=sys.stderr)
        return EXIT_ESTIMATION
    except MedtransportError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
