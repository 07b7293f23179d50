"""Command line entry point.

    rnnlab complexity --phi sin --r 2 --eps 0.01
    rnnlab train --config run.ini
    rnnlab verify zeta_c sign_change --json out.jsonl
    rnnlab rademacher --mode rnn --m 1024 --N 64
    rnnlab existence --config run.ini
    rnnlab theorem1 --config run.ini [--dry-run]

Exit codes: 0 all checks pass, 1 a check failed (or a stage raised),
2 bad usage or invalid config. Worker count comes from LAB_THREADS.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import os
import subprocess
import sys
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from . import complexity as cx
from . import concept, fitting, generalization, inputs, lemmas, rnn, sgd
from .numerics import RngStream, save_matrix
from .report import _clean

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


def version_string():
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(["git", "describe", "--always", "--tags", "--dirty"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}-{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _floats(s):
    return tuple(float(v) for v in s.replace(",", " ").split())


def _ints(s):
    return tuple(int(float(v)) for v in s.replace(",", " ").split())


@dataclass
class ExperimentConfig:
    m: int = 2048
    L: int = 4
    d: int = 2
    d_x: int = 4
    p: int = 1
    eps: float = 0.2
    eps_x: float = 0.1
    phi: str = "z"
    concept_path: str = ""
    loss: str = "centered-l2"
    noise_std: float = 0.0
    N: int = 512
    N_test: int = 2048
    seed: int = 0
    seeds: tuple = (0,)
    m_grid: tuple = ()
    out: str = "runs"
    threads: int = 1
    # training; None means the theory-derived value
    lam: float | None = None
    eta: float | None = None
    T: int | None = None
    T_cap: int = 200_000
    eval_every: int = 250
    snapshot_every: int = 0
    stop_margin: float | None = None
    heldout_slack: float = 0.1
    c_eta: float = 1.0
    c_T: float = 1.0
    # existence
    eps_e: float = 0.1
    eps_c: float | None = None
    n_check: int = 5
    # verify
    trials: int = 5
    lemma: dict = field(default_factory=dict)
    envelopes: dict = field(default_factory=dict)

    def dims(self, m=None):
        return rnn.Dims(int(m or self.m), self.d_x, self.d, self.L)

    def echo(self):
        return _clean(asdict(self))

    def validate(self):
        if self.concept_path and not os.path.exists(self.concept_path):
            raise ConfigError(f"concept file not found: {self.concept_path}")
        if not self.seeds:
            raise ConfigError("seed list is empty")
        if self.m_grid == () and self.m < 2:
            raise ConfigError("m must be at least 2")
        for k in ("N", "N_test", "L", "d", "d_x", "p", "trials", "eval_every"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be positive")
        if not 0 < self.eps_x < 1:
            raise ConfigError("eps_x must lie in (0, 1)")
        if not self.eps > 0:
            raise ConfigError("eps must be positive")
        try:
            cx.parse_phi(self.phi, self.eps)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        from .losses import get_loss
        try:
            get_loss(self.loss)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        unknown = set(self.envelopes) - set(lemmas.ENVELOPES)
        if unknown:
            raise ConfigError(f"unknown envelope constants: {sorted(unknown)}")
        return self

    @property
    def grid(self):
        return tuple(self.m_grid) or (self.m,)


_SECTIONS = {
    "dims": {"m": int, "L": int, "d": int, "d_x": int, "p": int},
    "run": {"eps": float, "eps_x": float, "phi": str, "concept": str, "loss": str, "noise_std": float,
            "N": int, "N_test": int, "seed": int, "seeds": _ints, "out": str, "threads": int},
    "sweep": {"m": _ints},
    "train": {"lam": float, "eta": float, "T": int, "T_cap": int, "eval_every": int, "snapshot_every": int,
              "stop_margin": float, "heldout_slack": float, "c_eta": float, "c_T": float},
    "existence": {"eps_e": float, "eps_c": float, "n_check": int},
    "verify": {"trials": int},
}


def load_config(path) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        cp.read(path)
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    cfg = ExperimentConfig()
    base = os.path.dirname(os.path.abspath(path))
    for sec in cp.sections():
        if sec == "envelopes":
            cfg.envelopes = {k: float(v) for k, v in cp[sec].items()}
            continue
        if sec == "lemma":
            cfg.lemma = {k: (_floats(v) if ("," in v or " " in v.strip()) else float(v))
                         for k, v in cp[sec].items()}
            continue
        if sec not in _SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        for k, v in cp[sec].items():
            k = k.replace("-", "_")
            kinds = _SECTIONS[sec]
            if k not in kinds:
                raise ConfigError(f"unknown key {k!r} in [{sec}]")
            try:
                val = kinds[k](v)
            except ValueError:
                raise ConfigError(f"bad value for {sec}.{k}: {v!r}") from None
            if sec == "sweep" and k == "m":
                if not val:
                    raise ConfigError("sweep grid m is empty")
                cfg.m_grid = val
            elif k == "concept":
                cfg.concept_path = val if os.path.isabs(val) else os.path.join(base, val)
            else:
                setattr(cfg, k, val)
    if not (cp.has_section("run") and "seeds" in cp["run"]):
        cfg.seeds = (cfg.seed,)
    return cfg.validate()


def _threads(cfg=None):
    if "LAB_THREADS" in os.environ:
        return lemmas.lab_threads()
    return max(1, cfg.threads if cfg else 1)


def _dump_json(path, payload):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(_clean(payload), f, indent=2, sort_keys=True)
        f.write("\n")


def _write_csv(path, rows, header_meta):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as f:
        for k, v in header_meta.items():
            f.write(f"# {k}: {json.dumps(_clean(v), sort_keys=True)}\n")
        if rows:
            w = csv.DictWriter(f, fieldnames=list(rows[0]))
            w.writeheader()
            for r in rows:
                w.writerow({k: _clean(v) for k, v in r.items()})


def _meta(cfg, seed):
    return {"version": version_string(), "config": cfg.echo() if cfg else {}, "seed": seed}


# ---------------------------------------------------------------- pipelines


def _concept_for(cfg, seed):
    if cfg.concept_path:
        F = concept.load_concept(cfg.concept_path)
        if (F.L, F.d_x, F.d) != (cfg.L, cfg.d_x, cfg.d):
            raise ConfigError("concept dimensions do not match [dims]")
        return F
    phi = cx.parse_phi(cfg.phi, cfg.eps)
    return concept.random_concept(cfg.L, cfg.d_x, cfg.d, cfg.p, phi, RngStream(seed, 1))


def _hyperparams(cfg, F, dims):
    overrides = {k: getattr(cfg, k) for k in ("lam", "eta", "T") if getattr(cfg, k) is not None}
    cc = concept.concept_complexity(F, cfg.L, cfg.eps)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sgd.HyperParamWarning)
        return sgd.derive_hyperparams(cc, dims, cfg.eps, cfg.eps_x, overrides, cfg.c_eta, cfg.c_T,
                                      cfg.T_cap)


def train_point(cfg: ExperimentConfig, m, seed, keep=False, callbacks=()):
    """One concept / data set / init / SGD run. Returns (row, TrainResult, extras)."""
    t0 = time.time()
    F = _concept_for(cfg, seed)
    Xs, Y, opt = concept.sample_dataset(F, cfg.N, RngStream(seed, 2), cfg.noise_std, cfg.loss)
    Xt, Yt, opt_t = concept.sample_dataset(F, cfg.N_test, RngStream(seed, 3), cfg.noise_std, cfg.loss)
    dims = cfg.dims(m)
    P = rnn.init_random(dims, RngStream(seed, 0))
    hp = _hyperparams(cfg, F, dims)
    stop = opt + cfg.stop_margin if cfg.stop_margin is not None else None
    res = sgd.train(P, Xs, Y, hp, cfg.loss, RngStream(seed, 4), callbacks=callbacks,
                    eval_every=cfg.eval_every, stop_below=stop)
    best = res.best_W_shift if res.best_W_shift is not None else res.W_shift
    Xta = inputs.actual_batch(Xt, hp.eps_x)
    test = sgd.empirical_risk(P, P.W + best, Xta, Yt, hp.lam, cfg.loss)
    row = {"m": m, "seed": seed, "steps": res.steps, "best_step": res.best_step,
           "train_risk": res.best_risk, "test_risk": test, "opt": opt, "opt_test": opt_t,
           "excess_train": res.best_risk - opt, "excess_test": test - opt_t,
           "lam": hp.lam, "eta": hp.eta, "T": hp.T, "best_shift_fro": float(np.linalg.norm(best)),
           "trajectory_hash": res.trajectory_hash}
    print(f"[m={m} seed={seed}] {time.time() - t0:.1f}s", file=sys.stderr)
    row["passed"] = bool(row["excess_train"] <= cfg.eps and row["excess_test"] <= cfg.eps + cfg.heldout_slack)
    extras = {"hp": hp, "history": res.history}
    if keep:
        extras.update(params=P, best=best, data=(Xs, Y), test=(Xt, Yt))
    return row, res, extras


def run_theorem1(cfg: ExperimentConfig, out_dir=None, dry_run=False):
    """Sweep over m_grid x seeds; one summary row per point. Returns (rows, exit_code)."""
    cfg.validate()
    points = [(m, s) for m in cfg.grid for s in cfg.seeds]
    if dry_run:
        return [{"m": m, "seed": s, "planned": True} for m, s in points], EXIT_OK
    out_dir = out_dir or cfg.out
    rows, failed = [], None

    def work(pt):
        return train_point(cfg, *pt)[0]

    try:
        with ThreadPoolExecutor(_threads(cfg)) as ex:
            for row in ex.map(work, points):
                rows.append(row)
                _write_csv(os.path.join(out_dir, "theorem1.csv"), rows, _meta(cfg, cfg.seeds))
    except Exception as e:  # partial results stay on disk
        failed = f"{type(e).__name__}: {e}"
    summary = {**_meta(cfg, list(cfg.seeds)), "rows": rows, "error": failed,
               "passed": failed is None and all(r["passed"] for r in rows)}
    _dump_json(os.path.join(out_dir, "theorem1.json"), summary)
    return rows, EXIT_OK if summary["passed"] else EXIT_FAIL


def run_lemma_suite(cfg: ExperimentConfig | None, ids=None, json_path=None, overrides=None,
                    envelopes=None):
    """Run lemma checks; returns (reports, exit_code). Raises KeyError on unknown ids."""
    ids = list(ids or lemmas.LEMMA_IDS)
    bad = [i for i in ids if i not in lemmas.LEMMA_IDS]
    if bad:
        raise KeyError(f"unknown lemma id(s) {bad}; valid ids: {', '.join(lemmas.LEMMA_IDS)}")
    conf = {}
    env = {}
    if cfg is not None:
        conf.update(m=cfg.m, L=cfg.L, d=cfg.d, d_x=cfg.d_x, seed=cfg.seed, trials=cfg.trials)
        conf.update(cfg.lemma)
        env = dict(cfg.envelopes)
    conf.update(overrides or {})
    env.update(envelopes or {})
    reports = []
    for lid in ids:
        reports.extend(lemmas.run_lemma(lid, conf, env))
    if json_path:
        os.makedirs(os.path.dirname(os.path.abspath(json_path)), exist_ok=True)
        meta = {"version": version_string(), "config": _clean(conf), "envelopes": env,
                "seed": conf.get("seed", lemmas.SUITE_DEFAULTS["seed"])}
        with open(json_path, "w") as f:
            for r in reports:
                f.write(json.dumps({**meta, **r.to_dict()}, sort_keys=True) + "\n")
    return reports, EXIT_OK if all(r.passed for r in reports) else EXIT_FAIL


def run_existence(cfg: ExperimentConfig, out_dir=None, export=None):
    seed = cfg.seed
    F = _concept_for(cfg, seed)
    P = rnn.init_random(cfg.dims(), RngStream(seed, 0))
    nt = rnn.forward(P, inputs.null_sequence(cfg.L, cfg.d_x, cfg.eps_x))
    wsb = fitting.build_w_star(P, F, nt, cfg.eps_e, cfg.eps_x, rng=RngStream(seed, 5), eps_c=cfg.eps_c)
    Xs = inputs.sample_true_batch(RngStream(seed, 6), cfg.n_check, cfg.L, cfg.d_x)
    rep = fitting.verify_existence(P, wsb, F, Xs, cfg.eps, cfg.eps_x)
    calib = {str(k): {"residual": h.residual, "residuals": h.residuals, "clamp": h.clamp}
             for k, h in wsb.fits.items()}
    payload = {**_meta(cfg, seed), "report": rep.to_dict(), "calibration": calib,
               "sigma": wsb.sigma, "eps_c": wsb.eps_c, "selected": wsb.selected,
               "wstar_fro": wsb.frobenius_norm(), "wstar_row_max": wsb.row_norm_max()}
    if out_dir:
        _dump_json(os.path.join(out_dir, "existence.json"), payload)
    if export:
        save_matrix(export, wsb.dense())
    return payload, rep


# ---------------------------------------------------------------- argument handling


def _apply_cli_overrides(cfg, args):
    for k in ("m", "L", "d", "d_x", "seed", "trials"):
        v = getattr(args, k, None)
        if v is not None:
            setattr(cfg, k, v)
    if getattr(args, "out", None):
        cfg.out = args.out
    if getattr(args, "seed", None) is not None:
        cfg.seeds = (args.seed,)
    return cfg


def _get_config(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    return _apply_cli_overrides(cfg, args).validate()


def cmd_complexity(args):
    try:
        phi = cx.parse_phi(args.phi, args.eps, args.degree)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    try:
        b = cx.budget(phi, args.r, args.eps, args.c_star)
    except OverflowError as e:
        print(json.dumps({"error": str(e)}))
        return EXIT_FAIL
    print(json.dumps({"phi": args.phi, "degree": phi.degree, "coeffs": list(phi.coeffs),
                      **asdict(b)}, sort_keys=True))
    return EXIT_OK


def cmd_train(args):
    cfg = _get_config(args)
    if args.dry_run:
        print(json.dumps({"dry_run": True, "config": cfg.echo()}, sort_keys=True))
        return EXIT_OK
    out = cfg.out
    cbs = ()
    if cfg.snapshot_every > 0:
        snap_dir = os.path.join(out, "snapshots")
        os.makedirs(snap_dir, exist_ok=True)
        base_W = {}

        def snap(t, Wcur, history):
            if t % cfg.snapshot_every == 0:
                save_matrix(os.path.join(snap_dir, f"step_{t:07d}.rnnw"), Wcur - base_W["W"])
            return False

        cbs = (snap,)
        # the callback sees W + W'; keep W to store the shift alone
        base_W["W"] = rnn.init_random(cfg.dims(), RngStream(cfg.seed, 0)).W
    row, res, ex = train_point(cfg, cfg.m, cfg.seed, keep=bool(args.snapshot), callbacks=cbs)
    meta = _meta(cfg, cfg.seed)
    _write_csv(os.path.join(out, "risk.csv"), res.history, meta)
    _dump_json(os.path.join(out, "summary.json"), {**meta, "summary": res.summary(), "row": row,
                                                   "hyperparams": ex["hp"].to_dict()})
    if args.snapshot:
        save_matrix(os.path.join(out, "W_shift.rnnw"), ex["best"])
    print(json.dumps(_clean(row), sort_keys=True))
    return EXIT_OK if row["passed"] else EXIT_FAIL


def _parse_envelope_args(items):
    env = {}
    for it in items or ():
        k, _, v = it.partition("=")
        if k not in lemmas.ENVELOPES or not v:
            raise ConfigError(f"bad --envelope {it!r}; known keys: {', '.join(lemmas.ENVELOPES)}")
        env[k] = float(v)
    return env


def cmd_verify(args):
    cfg = _get_config(args) if args.config else None
    over = {}
    for k in ("m", "L", "d", "d_x", "seed", "trials"):
        v = getattr(args, k)
        if v is not None:
            over[k] = v
    if args.eps_x is not None:
        over["eps_x"] = args.eps_x
    if args.grid:
        g = _floats(args.grid)
        over.update(m_grid=tuple(int(v) for v in g), Delta_grid=g, coupling_grid=g,
                    N_grid=tuple(int(v) for v in g), betas=g)
    if args.mc_samples:
        over["mc_samples"] = args.mc_samples
    env = _parse_envelope_args(args.envelope)
    try:
        reports, code = run_lemma_suite(cfg, args.ids or None, args.json, over, env)
    except KeyError as e:
        print(str(e).strip("'\""), file=sys.stderr)
        return EXIT_USAGE
    for r in reports:
        print(r.line())
    return code


def cmd_rademacher(args):
    gen = np.random.default_rng(args.seed)
    out = {"version": version_string(), "seed": args.seed, "mode": args.mode,
           "config": {"N": args.N, "m": args.m, "Delta": args.Delta, "draws": args.draws, "dim": args.dim}}
    if args.mode == "linear":
        rows = []
        for N in args.N:
            X = gen.standard_normal((N, args.dim))
            X /= np.linalg.norm(X, axis=1, keepdims=True)
            rows.append(generalization.rademacher_linear(X, args.B, args.draws, RngStream(args.seed, 1)).to_dict())
    else:
        rows = []
        for m in args.m:
            P = rnn.init_random(rnn.Dims(m, args.d_x, args.d, args.L), RngStream(args.seed, 0))
            for N in args.N:
                Xs = inputs.sample_true_batch(RngStream(args.seed, 2), N, args.L, args.d_x)
                X = inputs.actual_batch(Xs, args.eps_x)
                trs = [rnn.forward(P, x) for x in X]
                rows.append(generalization.rademacher_rnn_linearized(
                    P, trs, args.Delta, args.draws, RngStream(args.seed, 1)).to_dict())
            del P
    out["estimates"] = rows
    text = json.dumps(_clean(out), sort_keys=True)
    if args.json:
        _dump_json(args.json, out)
    print(text)
    return EXIT_OK


def cmd_existence(args):
    cfg = _get_config(args)
    payload, rep = run_existence(cfg, cfg.out, args.export)
    print(rep.line())
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_theorem1(args):
    cfg = _get_config(args)
    rows, code = run_theorem1(cfg, cfg.out, args.dry_run)
    for r in rows:
        print(json.dumps(_clean(r), sort_keys=True))
    return code


def build_parser():
    ap = argparse.ArgumentParser(prog="rnnlab", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("complexity", help="both complexity measures of a series")
    p.add_argument("--phi", required=True)
    p.add_argument("--r", type=float, required=True)
    p.add_argument("--eps", type=float, default=0.01)
    p.add_argument("--degree", type=int)
    p.add_argument("--c-star", type=float, default=cx.DEFAULT_C_STAR)
    p.set_defaults(fn=cmd_complexity)

    def common(p, lemma=False):
        p.add_argument("--config")
        p.add_argument("--m", type=int)
        p.add_argument("--L", type=int)
        p.add_argument("--d", type=int)
        p.add_argument("--d-x", dest="d_x", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--trials", type=int)
        if not lemma:
            p.add_argument("--out")

    p = sub.add_parser("train", help="one SGD run")
    common(p)
    p.add_argument("--dry-run", action="store_true")
    p.add_argument("--snapshot", action="store_true", help="save the best W' as W_shift.rnnw")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("verify", help="lemma checks")
    p.add_argument("ids", nargs="*", help=f"subset of: {', '.join(lemmas.LEMMA_IDS)}")
    common(p, lemma=True)
    p.add_argument("--eps-x", dest="eps_x", type=float)
    p.add_argument("--grid", help="comma separated grid for the selected checks")
    p.add_argument("--mc-samples", type=int)
    p.add_argument("--envelope", action="append", metavar="KEY=VALUE")
    p.add_argument("--json")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("rademacher", help="Rademacher estimates")
    p.add_argument("--mode", choices=("linear", "rnn"), required=True)
    p.add_argument("--N", type=int, nargs="+", default=[16, 64, 256])
    p.add_argument("--m", type=int, nargs="+", default=[1024])
    p.add_argument("--L", type=int, default=4)
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--d-x", dest="d_x", type=int, default=4)
    p.add_argument("--eps-x", dest="eps_x", type=float, default=0.025)
    p.add_argument("--Delta", type=float, default=1.0)
    p.add_argument("--B", type=float, default=1.0)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--draws", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json")
    p.set_defaults(fn=cmd_rademacher)

    p = sub.add_parser("existence", help="build and check the explicit shift")
    common(p)
    p.add_argument("--export", help="write the dense shift in matrix snapshot format")
    p.set_defaults(fn=cmd_existence)

    p = sub.add_parser("theorem1", help="end-to-end sweep")
    common(p)
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(fn=cmd_theorem1)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        print(f"failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
