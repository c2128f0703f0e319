"""Command-line entry point: ``igcnet <command> --config run.yaml``.

Commands: gen-data, train, predict, evaluate, sweep, oracle-check.
Exit codes: 0 ok, 1 usage or config error, 2 runtime failure, 3 a failed
oracle check.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .datagen.dataset import config_hash, load_dataset, load_queries, save_dataset, save_queries, write_atomic
from .evaluation import ESTIMATORS, BenchmarkSpec, build_data, predict_queries, results_to_csv, rmse, run_sweep
from .evaluation import ResultRow, summarize

log = logging.getLogger("igcnet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


# -- config schema ------------------------------------------------------------

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(_Strict):
    dgp: Literal["tumor", "scm", "semisynth"] = "tumor"
    params: dict = Field(default_factory=dict)
    N: int = Field(500, ge=1)
    N_test: int = Field(300, ge=1)
    a_bar: Optional[list] = None
    oracle_draws: int = Field(1000, ge=1)
    n_queries: int = Field(50, ge=1)


class ModelSection(_Strict):
    estimator: Literal["igc", "igc_biased", "history", "ipw", "mc_gcomp"] = "igc"
    train: dict = Field(default_factory=dict)


class SweepSection(_Strict):
    grid: dict = Field(default_factory=dict)
    estimators: list = Field(default_factory=lambda: ["igc"])
    taus: list = Field(default_factory=lambda: [2])
    seeds: list = Field(default_factory=lambda: [0])
    record_runtime: bool = False


class IoSection(_Strict):
    dataset: Optional[str] = None
    test_dataset: Optional[str] = None
    queries: Optional[str] = None
    checkpoint: Optional[str] = None
    loss_csv: Optional[str] = None
    predictions: Optional[str] = None
    results_csv: Optional[str] = None
    results_json: Optional[str] = None


class RunConfig(_Strict):
    seed: int = 0
    data: DataSection = Field(default_factory=DataSection)
    model: ModelSection = Field(default_factory=ModelSection)
    sweep: SweepSection = Field(default_factory=SweepSection)
    io: IoSection = Field(default_factory=IoSection)

    def hash(self) -> str:
        return config_hash(self.model_dump(exclude={"io"}))

    def data_hash(self) -> str:
        return config_hash({"seed": self.seed, "data": self.data.model_dump()})


def load_config(path: Optional[str], overrides: dict) -> RunConfig:
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise UsageError(f"config is not valid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise UsageError("config must be a mapping at the top level")
    for dotted, value in overrides.items():
        node = raw
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        lines = [f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors()]
        raise UsageError("invalid config:\n  " + "\n  ".join(lines)) from exc


def _need(cfg: RunConfig, *fields: str) -> list:
    paths = []
    for f in fields:
        v = getattr(cfg.io, f)
        if v is None:
            raise UsageError(f"io.{f} is required for this command")
        paths.append(Path(v))
    return paths


def _need_existing(cfg: RunConfig, *fields: str) -> list:
    paths = _need(cfg, *fields)
    for f, p in zip(fields, paths):
        if not p.is_file():
            raise UsageError(f"io.{f} not found: {p}")
    return paths


def _check_outputs(*paths: Path) -> None:
    for p in paths:
        if not p.parent.is_dir():
            raise UsageError(f"output directory does not exist: {p.parent}")


def benchmark_spec(cfg: RunConfig) -> BenchmarkSpec:
    return BenchmarkSpec(
        dgp=cfg.data.dgp, dgp_params=dict(cfg.data.params), grid=dict(cfg.sweep.grid),
        estimators=list(cfg.sweep.estimators), taus=list(cfg.sweep.taus), N=cfg.data.N,
        N_test=cfg.data.N_test, seeds=list(cfg.sweep.seeds), a_bar=cfg.data.a_bar,
        train=dict(cfg.model.train), oracle_draws=cfg.data.oracle_draws,
        n_queries=cfg.data.n_queries, record_runtime=cfg.sweep.record_runtime,
    )


def _header(cfg: RunConfig) -> str:
    return f"# config_hash={cfg.hash()} seed={cfg.seed}\n"


# -- commands -----------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, jobs: int) -> int:
    train_p, test_p, query_p = _need(cfg, "dataset", "test_dataset", "queries")
    _check_outputs(train_p, test_p, query_p)
    spec = benchmark_spec(cfg)
    spec.validate()
    a_bar = None if cfg.data.a_bar is None else np.asarray(cfg.data.a_bar, dtype=np.float64)
    tau = 2 if a_bar is None else a_bar.shape[0]
    train, test, queries, _, _ = build_data(spec, {}, tau, cfg.seed, a_bar)
    dh = cfg.data_hash()
    for ds, role in ((train, "train"), (test, "test")):
        ds.meta.update(data_hash=dh, role=role, run_seed=cfg.seed)
    save_dataset(train, train_p)
    save_dataset(test, test_p)
    save_queries(queries, query_p, {"data_hash": dh, "seed": cfg.seed, "test_config_hash": test.meta["config_hash"]})
    print(f"wrote {len(train)} train / {len(test)} test trajectories and {len(queries)} queries")
    return EXIT_OK


def _train_config(cfg: RunConfig, tau: Optional[int] = None):
    from .training import TrainConfig

    kw = dict(cfg.model.train)
    kw.setdefault("seed", cfg.seed)
    if tau is not None:
        kw.setdefault("tau", tau)
    if cfg.data.a_bar is not None:
        kw.setdefault("a_bar", cfg.data.a_bar)
    try:
        tc = TrainConfig(**kw)
    except TypeError as exc:
        raise UsageError(f"model.train: {exc}") from exc
    return tc


def cmd_train(cfg: RunConfig, jobs: int) -> int:
    from .checkpoint import save_checkpoint
    from .training import ConfigError

    (data_p,) = _need_existing(cfg, "dataset")
    ckpt_p, loss_p = _need(cfg, "checkpoint", "loss_csv")
    _check_outputs(ckpt_p, loss_p)
    tau = None if cfg.data.a_bar is None else len(cfg.data.a_bar)
    tc = _train_config(cfg, tau)
    ds = load_dataset(data_p)
    try:
        tc.validate(ds.d_a)
    except ConfigError as exc:
        raise UsageError(f"model.train: {exc}") from exc
    model = ESTIMATORS[cfg.model.estimator](ds, tc)
    save_checkpoint(model, ckpt_p, dataset_hash=ds.meta.get("data_hash"))
    buf = io.StringIO()
    buf.write(_header(cfg))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss"])
    for e, v in enumerate(model.loss_history):
        w.writerow([e, repr(float(v))])
    write_atomic(loss_p, buf.getvalue())
    print(f"trained {model.kind}; final loss {model.loss_history[-1] if model.loss_history else float('nan'):.6g}")
    return EXIT_OK


def _load_eval_inputs(cfg: RunConfig):
    from .checkpoint import load_checkpoint

    ckpt_p, test_p, query_p = _need_existing(cfg, "checkpoint", "test_dataset", "queries")
    model = load_checkpoint(ckpt_p)
    test = load_dataset(test_p)
    queries, qmeta = load_queries(query_p)
    return model, test, queries, qmeta


def cmd_predict(cfg: RunConfig, jobs: int) -> int:
    (out_p,) = _need(cfg, "predictions")
    _check_outputs(out_p)
    model, test, queries, _ = _load_eval_inputs(cfg)
    pred = predict_queries(model, test, queries)
    out = {
        "meta": {"config_hash": cfg.hash(), "seed": cfg.seed, "estimator": model.kind,
                 "dataset_hash": getattr(model, "dataset_hash", None)},
        "predictions": [{"trajectory_id": int(q.trajectory_id), "t": int(q.t),
                         "a_seq": q.a_seq.astype(int).tolist(), "prediction": p.tolist()}
                        for q, p in zip(queries, pred)],
    }
    write_atomic(out_p, json.dumps(out, sort_keys=True) + "\n")
    print(f"wrote {len(queries)} predictions")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, jobs: int) -> int:
    (out_p,) = _need(cfg, "results_csv")
    _check_outputs(out_p)
    model, test, queries, qmeta = _load_eval_inputs(cfg)
    hashes = {"checkpoint": getattr(model, "dataset_hash", None), "test dataset": test.meta.get("data_hash"),
              "queries": qmeta.get("data_hash")}
    if len(set(hashes.values())) != 1 or None in hashes.values():
        raise UsageError(f"data hashes disagree, refusing to evaluate: {hashes}")
    if not queries or any(q.oracle is None for q in queries):
        raise UsageError("queries carry no oracle values")
    pred = predict_queries(model, test, queries)
    oracle = np.stack([q.oracle for q in queries])
    if test.meta.get("dgp") == "tumor":
        from .datagen.tumor import TumorParams

        norm = TumorParams(**test.meta["params"]).V_max
    else:
        norm = float(np.max(np.abs(oracle))) or 1.0
    meta = test.meta
    row = ResultRow(
        estimator=model.kind, dgp=str(meta.get("dgp")),
        gamma=float(meta.get("params", {}).get("gamma", float("nan"))),
        rho=float(meta.get("params", {}).get("rho_ov", 1.0)),
        omega=float(meta.get("params", {}).get("omega", 0.0)),
        corruption=float(model.cfg.corruption_bias), tau=int(model.cfg.tau), N=cfg.data.N, seed=cfg.seed,
        rmse=rmse(pred, oracle), rmse_norm=rmse(pred, oracle, "max", norm), cv_group=model.kind,
        runtime_s=None, n_queries=len(queries),
    )
    write_atomic(out_p, _header(cfg) + results_to_csv([row]))
    print(f"{row.estimator}: rmse={row.rmse:.6g} rmse_norm={row.rmse_norm:.6g} over {row.n_queries} queries")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, jobs: int) -> int:
    csv_p, json_p = _need(cfg, "results_csv", "results_json")
    _check_outputs(csv_p, json_p)
    spec = benchmark_spec(cfg)
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(f"sweep: {exc}") from exc
    rows = run_sweep(spec, jobs=jobs)
    write_atomic(csv_p, _header(cfg) + results_to_csv(rows))
    summary = summarize(rows)
    summary["meta"] = {"config_hash": cfg.hash(), "seed": cfg.seed, "spec": spec.to_dict(),
                       "failed_rows": sum(r.error is not None for r in rows)}
    write_atomic(json_p, json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(rows)} rows ({summary['meta']['failed_rows']} failed)")
    return EXIT_OK


def oracle_checks() -> list:
    """``(name, passed, detail)`` for the discrete-SCM and variance batteries."""
    from .datagen.scm import confounded_scm, gformula, gformula_matrix, mc_oracle, naive_conditional, null_effect_scm
    from .evaluation import StaticFixture, prop3_fixture, variance_comparison
    from .rng import stream

    out = []
    scm, null = confounded_scm(), null_effect_scm()
    seqs = [(1, 1), (0, 1), (1, 0, 1)]
    err = max(abs(gformula(scm, s, a) - gformula_matrix(scm, s, a)) for s in range(scm.n_states) for a in seqs)
    out.append(("scm: enumeration equals forward propagation", err < 1e-12, f"max diff {err:.2e}"))
    z = []
    for s in range(scm.n_states):
        m, se = mc_oracle(scm, s, (1, 1), 20000, stream(0, "oracle-check", s))
        z.append(abs(m - gformula(scm, s, (1, 1))) / se)
    out.append(("scm: Monte Carlo within 4 SE of enumeration", max(z) < 4, f"max z {max(z):.2f}"))
    spread = max(np.ptp([gformula(null, s, a) for a in ((0, 0), (0, 1), (1, 0), (1, 1))]) for s in range(4))
    out.append(("scm: null effect makes the G-formula ignore treatment", spread < 1e-12, f"max spread {spread:.2e}"))
    gap = abs(gformula(scm, 0, (1, 1)) - naive_conditional(scm, 0, (1, 1)))
    out.append(("scm: confounded fixture has a naive/G-formula gap", gap > 0.05, f"gap {gap:.4f}"))
    r = variance_comparison(prop3_fixture(), n=200_000, seed=0)
    out.append(("variance: IPW variance >= regression variance", r.var_ipw >= r.var_gcomp,
                f"{r.var_ipw:.6f} vs {r.var_gcomp:.6f}"))
    out.append(("variance: gap equals closed form", abs(r.gap - r.gap_closed_form) < 1e-10,
                f"diff {abs(r.gap - r.gap_closed_form):.2e}"))
    ok = abs(r.emp_var_ipw - r.var_ipw) < 3 * r.se_ipw and abs(r.emp_var_gcomp - r.var_gcomp) < 3 * r.se_gcomp
    out.append(("variance: empirical within 3 SE", ok, f"ipw z={(r.emp_var_ipw - r.var_ipw) / r.se_ipw:.2f}"))
    eq = variance_comparison(StaticFixture([0.5, 0.5], [1.0, 1.0], [0.0, 1.0], [[1, 0], [0, 1]]), n=1000)
    out.append(("variance: equality case has zero gap", abs(eq.gap) < 1e-12, f"gap {eq.gap:.2e}"))
    return out


def cmd_oracle_check(cfg: RunConfig, jobs: int) -> int:
    results = oracle_checks()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_CHECK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "oracle-check": cmd_oracle_check,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="igcnet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="YAML run config")
        s.add_argument("--seed", type=int, help="global seed (overrides the config)")
        s.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. data.N=100 (value parsed as YAML)")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Optional[list] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            overrides[k] = yaml.safe_load(v)
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg, args.jobs)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failure: report, never leave a half-written artifact
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
