"""Command line front end: TOML experiment configs, pipelines, run records and reports.

Subcommands
-----------
``validate --config path``
    Parse and validate a config; prints every problem with its field path.
``run --config path [--seed u64] [--workers k] [--out dir]``
    Dispatch the configured mode and write CSV/JSON outputs plus ``run_record.json``.
``report --in dir``
    Collect every run record below ``dir`` into ``report.md`` and ``report_tables.csv``.
``oracle --config path [--out dir]``
    Only the brute-force oracles (exact step law or exact tower laws), for fixture regeneration.

Exit codes: 0 when every verdict passes, 2 when some verdict fails, 1 on errors.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import math
import sys
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Any

import numpy as np

from . import bounds as B
from . import geometry as G
from . import montecarlo as M
from . import spectral as S
from . import tower as T

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

MODES = ("billiard-lld", "billiard-clt", "tail", "spectral", "renewal", "corridor-corr", "abstract")
LATTICE_MODES = {"billiard-lld", "billiard-clt", "tail", "corridor-corr"}
MODEL_MODES = {"spectral", "renewal", "abstract"}
RECORD_NAME = "run_record.json"
U64 = 2**64

BOUNDS_DEFAULTS = {"C": 1.0, "omega": None, "eps1": B.DEFAULT_EPS1, "b": 1.0, "delta": S.DELTA}
RUN_KEYS = {"mode", "n_values", "samples", "seed", "workers", "thresholds", "fit_window", "p_range",
            "r_range", "c", "max_scale", "min_count", "ks_max"}
TOP_KEYS = {"lattice", "disk", "run", "bounds", "model", "output_dir"}


class ConfigError(ValueError):
    """Invalid experiment config; ``problems`` holds ``"field.path: message"`` strings."""

    def __init__(self, problems):
        self.problems = [problems] if isinstance(problems, str) else list(problems)
        super().__init__("; ".join(self.problems))

    @property
    def field(self) -> str:
        return self.problems[0].split(":", 1)[0]


class MissingArtifacts(FileNotFoundError):
    """The report input lacks the run outputs it needs."""

    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("missing artifacts: " + ", ".join(map(str, self.missing)))


# ----------------------------------------------------------------------------
# config


@dataclass
class ExperimentConfig:
    mode: str
    n_values: list
    samples: int
    seed: int
    workers: int | None
    lattice: G.LatticeConfig | None
    bounds: dict
    model: dict | None
    output_dir: Path
    options: dict = field(default_factory=dict)
    base_dir: Path = Path(".")
    worker_override: int | None = None

    def effective_workers(self) -> int:
        """CLI flag, then the environment variable, then the config value."""
        return M.resolve_workers(self.worker_override, self.workers)

    def to_dict(self) -> dict:
        """Canonical form used for the digest; worker count is excluded since it never changes results."""
        doc: dict[str, Any] = {
            "run": {"mode": self.mode, "n_values": list(self.n_values), "samples": self.samples,
                    "seed": self.seed, **self.options},
            "bounds": dict(self.bounds),
        }
        if self.lattice is not None:
            doc.update(self.lattice.to_dict())
        if self.model is not None:
            doc["model"] = dict(self.model)
        return doc

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _int_list(value, path, problems, minimum=1):
    if not isinstance(value, list) or not value:
        problems.append(f"{path}: must be a nonempty list of integers")
        return []
    out = []
    for i, v in enumerate(value):
        if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
            problems.append(f"{path}[{i}]: must be an integer >= {minimum}, got {v!r}")
        else:
            out.append(v)
    return out


def _number(section, key, path, problems, lo=None, hi=None, default=None):
    v = section.get(key, default)
    if v is None:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        problems.append(f"{path}: must be a finite number, got {v!r}")
        return default
    if (lo is not None and v <= lo) or (hi is not None and v >= hi):
        problems.append(f"{path}: must lie in ({lo}, {hi}), got {v}")
        return default
    return float(v)


def parse_config(doc: dict, base_dir: Path | str = ".") -> ExperimentConfig:
    """Validate a parsed TOML document and build an :class:`ExperimentConfig`.

    Raises
    ------
    ConfigError
        Listing every problem, each prefixed with its field path.
    """
    problems: list[str] = []
    for key in doc:
        if key not in TOP_KEYS:
            problems.append(f"{key}: unknown section")
    run = doc.get("run")
    if not isinstance(run, dict):
        raise ConfigError(problems + ["run: section is required"])
    for key in run:
        if key not in RUN_KEYS:
            problems.append(f"run.{key}: unknown key")
    mode = run.get("mode")
    if mode not in MODES:
        problems.append(f"run.mode: must be one of {', '.join(MODES)}, got {mode!r}")
    n_values = _int_list(run.get("n_values"), "run.n_values", problems)
    samples = run.get("samples", 0)
    if isinstance(samples, bool) or not isinstance(samples, int) or samples < 0:
        problems.append(f"run.samples: must be a nonnegative integer, got {samples!r}")
        samples = 0
    if mode in LATTICE_MODES and samples < 1:
        problems.append("run.samples: must be positive for Monte Carlo modes")
    seed = run.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < U64:
        problems.append(f"run.seed: must be an unsigned 64-bit integer, got {seed!r}")
        seed = 0
    workers = run.get("workers")
    if workers is not None and (isinstance(workers, bool) or not isinstance(workers, int) or workers < 1):
        problems.append(f"run.workers: must be a positive integer, got {workers!r}")
        workers = None
    options = {k: run[k] for k in sorted(RUN_KEYS - {"mode", "n_values", "samples", "seed", "workers"}) if k in run}

    bsec = doc.get("bounds", {})
    bounds = dict(BOUNDS_DEFAULTS)
    for key in bsec:
        if key not in BOUNDS_DEFAULTS:
            problems.append(f"bounds.{key}: unknown key")
    bounds["C"] = _number(bsec, "C", "bounds.C", problems, lo=0, default=1.0)
    bounds["omega"] = _number(bsec, "omega", "bounds.omega", problems, lo=0)
    bounds["eps1"] = _number(bsec, "eps1", "bounds.eps1", problems, lo=0, hi=1, default=B.DEFAULT_EPS1)
    bounds["b"] = _number(bsec, "b", "bounds.b", problems, lo=0, default=1.0)
    bounds["delta"] = _number(bsec, "delta", "bounds.delta", problems, lo=0, hi=0.5, default=S.DELTA)
    if bounds["omega"] is None:
        bounds["omega"] = 1.0 / bounds["eps1"]

    lattice = None
    if "disk" in doc or "lattice" in doc:
        try:
            lattice = G.config_from_dict(doc)
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"disk: malformed scatterer entry ({exc})")
        else:
            problems.extend(G.validate_config(lattice).violations)
    if mode in LATTICE_MODES and lattice is None:
        problems.append("disk: at least one [[disk]] entry is required for this mode")

    model = doc.get("model")
    if model is not None:
        if not isinstance(model, dict) or ("name" in model) == ("path" in model):
            problems.append("model: give exactly one of model.name or model.path")
        elif "name" in model and not _known_model(model["name"]):
            problems.append(f"model.name: unknown model {model['name']!r}")
        elif "path" in model and not (Path(base_dir) / model["path"]).is_file():
            problems.append(f"model.path: file not found: {model['path']}")
    if mode in MODEL_MODES and model is None:
        problems.append("model: section is required for this mode")

    out = doc.get("output_dir", "out")
    if not isinstance(out, str) or not out:
        problems.append("output_dir: must be a nonempty path string")
        out = "out"
    _check_options(mode, options, problems)
    if problems:
        raise ConfigError(problems)
    out_path = Path(out)
    if not out_path.is_absolute():
        out_path = Path(base_dir) / out_path
    return ExperimentConfig(mode, n_values, samples, seed, workers, lattice, bounds, model, out_path,
                            options, Path(base_dir))


def _check_options(mode, options, problems):
    if "thresholds" in options:
        _int_list(options["thresholds"], "run.thresholds", problems)
    for key in ("p_range", "r_range"):
        if key in options:
            _int_list(options[key], f"run.{key}", problems, minimum=0)
    if "fit_window" in options:
        fw = options["fit_window"]
        if not (isinstance(fw, list) and len(fw) == 2 and all(isinstance(x, (int, float)) for x in fw) and fw[0] < fw[1]):
            problems.append("run.fit_window: must be [lo, hi] with lo < hi")
    for key, lo in (("c", 0), ("max_scale", 0), ("ks_max", 0)):
        if key in options:
            _number(options, key, f"run.{key}", problems, lo=lo)
    if "min_count" in options:
        v = options["min_count"]
        if isinstance(v, bool) or not isinstance(v, int) or v < 1:
            problems.append("run.min_count: must be a positive integer")


def _known_model(name: str) -> bool:
    if name in T.shipped_models():
        return True
    if name.startswith("heavy-"):
        return name[6:].isdigit() and int(name[6:]) >= 1
    return False


def load_experiment(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"<file>: TOML syntax error: {exc}") from exc
    return parse_config(doc, path.parent)


def resolve_model(cfg: ExperimentConfig) -> tuple[str, T.GibbsMarkovBase]:
    spec = cfg.model
    if "path" in spec:
        base = T.load_base(cfg.base_dir / spec["path"])
        return base.name or Path(spec["path"]).stem, base
    name = spec["name"]
    shipped = T.shipped_models()
    if name in shipped:
        return name, shipped[name]
    return name, T.make_heavy_tailed_model(int(name[6:]))


def _heavy(cfg: ExperimentConfig, name: str) -> bool:
    """Whether the m^-2 tail shape checks apply down to |t| = 1e-4.

    ``model.heavy_tailed`` wins; otherwise a ``heavy-<m>`` model qualifies once
    its truncation 1/m lies below that scale, since a tail cut at m looks
    Gaussian for |t| < 1/m.
    """
    if "heavy_tailed" in cfg.model:
        return bool(cfg.model["heavy_tailed"])
    return name.startswith("heavy-") and name[6:].isdigit() and int(name[6:]) >= 10_000


# ----------------------------------------------------------------------------
# outputs


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (list, tuple)):
        return json.dumps([_plain(x) for x in v])
    return str(v)


def _plain(v):
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, complex):
        return [v.real, v.imag]
    return v


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])


def _trend(x, y) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    ok = (x > 0) & (y > 0)
    if ok.sum() < 2:
        return 0.0
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


def _table(name, file, ratios, x=None) -> dict:
    r = np.asarray(ratios, float)
    r = r[np.isfinite(r)]
    if r.size == 0:
        return {"inequality": name, "file": file, "sup": None, "median": None, "slope": None}
    slope = _trend(x, ratios) if x is not None else 0.0
    return {"inequality": name, "file": file, "sup": float(r.max()), "median": float(np.median(r)), "slope": slope}


@dataclass
class RunRecord:
    config_digest: str
    artifact_version: str
    mode: str
    started: str
    finished: str
    files: list
    verdicts: dict
    tables: list
    summary: dict

    @property
    def ok(self) -> bool:
        return all(self.verdicts.values())

    def save(self, directory: Path) -> None:
        (directory / RECORD_NAME).write_text(json.dumps(asdict(self), indent=2, default=_plain) + "\n")

    @staticmethod
    def load(path) -> "RunRecord":
        """Read a record from its file or from the run directory holding it."""
        path = Path(path)
        if path.is_dir():
            path = path / RECORD_NAME
        return RunRecord(**json.loads(path.read_text()))


def _version() -> str:
    try:
        return metadata.version("lorentz-lld")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


# ----------------------------------------------------------------------------
# pipelines; each returns (files, verdicts, tables, summary)


def _pipe_tail(cfg, out):
    th = cfg.options.get("thresholds", [1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024])
    fw = tuple(cfg.options.get("fit_window", [8, 256]))
    tc = M.estimate_tail(cfg.lattice, cfg.samples, cfg.seed, th, fit_window=fw, workers=cfg.effective_workers())
    _write_csv(out / "tail.csv", ["m", "survival", "stderr", "exceedances", "m2_survival"],
               [(m, s, e, x, m * m * s) for m, s, e, x in zip(tc.thresholds, tc.survival, tc.standard_errors,
                                                             tc.exceedances)])
    summary = {"fitted_exponent": tc.fitted_exponent, "fit_window": list(fw), "total_samples": tc.total_samples}
    (out / "tail_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    m2 = [m * m * s for m, s in zip(tc.thresholds, tc.survival)]
    verdicts = {"tail_exponent_in_[-2.35,-1.65]": -2.35 <= tc.fitted_exponent <= -1.65}
    return ["tail.csv", "tail_summary.json"], verdicts, [_table("one-step tail m^2 mu(|kappa|>m)", "tail.csv", m2,
                                                                 tc.thresholds)], summary


def _histograms(cfg, out):
    laws = M.estimate_displacement_laws(cfg.lattice, cfg.n_values, cfg.samples, cfg.seed,
                                        workers=cfg.effective_workers())
    hs = [laws[n] for n in sorted(laws)]
    files = []
    for h in hs:
        name = f"hist_n{h.n}.csv"
        h.save(out / name, out / f"hist_n{h.n}.json")
        files += [name, f"hist_n{h.n}.json"]
    return hs, files


def _pipe_lld(cfg, out):
    hs, files = _histograms(cfg, out)
    rep = B.ratio_table(hs, "lld", omega=cfg.bounds["omega"], eps1=cfg.bounds["eps1"], C=cfg.bounds["C"],
                        min_count=cfg.options.get("min_count", B.DEFAULT_MIN_COUNT),
                        max_scale=cfg.options.get("max_scale", 4.0))
    rep.to_csv(out / "lld_ratios.csv")
    s = rep.summary()
    per_n = rep.per_n()
    verdicts = {"lld_max_over_median<=10": bool(s["max_over_median"] <= 10.0),
                "lld_slope<=0.1": bool(s["slope_max"] <= 0.1)}
    table = {"inequality": "local large deviation bound", "file": "lld_ratios.csv", "sup": s["max"], "median": s["median"],
             "slope": s["slope_max"]}
    s["per_n_median"] = {str(k): v for k, v in per_n.items()}
    s["overflow"] = {str(h.n): h.overflow_count for h in hs}
    return files + ["lld_ratios.csv"], verdicts, [table], s


def _pipe_clt(cfg, out):
    hs, files = _histograms(cfg, out)
    fits = [M.clt_fit(h) for h in hs]
    _write_csv(out / "clt.csv", ["n", "ks", "sigma", "variance", "samples"],
               [(f.n, f.ks, f.sigma, f.variance, f.samples) for f in fits])
    ks_max = cfg.options.get("ks_max", 0.05)
    verdicts = {f"ks<={ks_max}": fits[-1].ks <= ks_max}
    summary = {"ks": {str(f.n): f.ks for f in fits}, "variance": {str(f.n): f.variance for f in fits}}
    if len(fits) >= 2:
        a, b = fits[-2].variance, fits[-1].variance
        change = abs(b - a) / a
        summary["variance_change_last_two"] = change
        verdicts["variance_stable_within_25%"] = change <= 0.25
    tables = [_table("CLT normalization (variance of kappa_n/a_n)", "clt.csv", [f.variance for f in fits],
                     [f.n for f in fits])]
    return files + ["clt.csv"], verdicts, tables, summary


def _pipe_corr(cfg, out):
    p_range = cfg.options.get("p_range", [8, 16, 32, 64, 128])
    r_range = cfg.options.get("r_range", [0, 1, 2, 4])
    c = cfg.options.get("c", 1.0)
    tab = M.estimate_corridor_correlation(cfg.lattice, p_range, r_range, c, cfg.samples, cfg.seed,
                                          workers=cfg.effective_workers())
    rows, ratios, ps = [], [], []
    for i, p in enumerate(tab.p_values):
        for j, r in enumerate(tab.r_values):
            rows.append((p, r, tab.ratio[i, j], tab.standard_error[i, j], int(tab.conditioning_counts[i]),
                         int(bool(tab.unreliable[i]))))
            if r > 0 and not tab.unreliable[i]:
                ratios.append(tab.ratio[i, j])
                ps.append(p)
    _write_csv(out / "corridor_correlation.csv", ["p", "r", "ratio", "stderr", "conditioning", "unreliable"], rows)
    verdicts = {"ratios_in_[0,1]": bool(np.all((tab.ratio >= 0) & (tab.ratio <= 1) | np.isnan(tab.ratio))),
                "some_reliable_cell": bool(len(ratios) > 0)}
    t = _table("corridor correlation", "corridor_correlation.csv", ratios, ps)
    return ["corridor_correlation.csv"], verdicts, [t], {"reliable_cells": len(ratios)}


def _pipe_renewal(cfg, out):
    name, base = resolve_model(cfg)
    tw = T.build_tower(base)
    e1 = np.zeros(tw.dimension)
    e1[0] = 1.0
    rows = []
    worst = 0.0
    for rad in (0.3, 0.6, 0.9):
        for k in range(4):
            z = rad * np.exp(0.5j * np.pi * k)
            for t in (0.0, 0.05, 0.2):
                r = S.verify_renewal_identity(tw, [z], [t * e1], N_max=200)
                rows.append((rad, k * 90, t, r.inverse, r.decomposition))
                worst = max(worst, r.inverse, r.decomposition)
    _write_csv(out / "renewal.csv", ["abs_z", "arg_z_deg", "t", "inverse_residual", "decomposition_residual"], rows)
    verdicts = {"renewal_residuals<=1e-8": worst <= 1e-8}
    table = {"inequality": "Renewal identities (residual)", "file": "renewal.csv", "sup": worst,
             "median": float(np.median([max(r[3], r[4]) for r in rows])), "slope": 0.0}
    return ["renewal.csv"], verdicts, [table], {"model": name, "worst_residual": worst}


def _pipe_spectral(cfg, out):
    name, base = resolve_model(cfg)
    tw = T.build_tower(base)
    delta, b0 = cfg.bounds["delta"], cfg.bounds["b"]
    heavy = _heavy(cfg, name)
    files, verdicts, tables, summary = [], {}, [], {"model": name, "states": tw.n_states}
    if tw.dimension != 1:
        raise NotImplementedError("spectral mode supports d = 1 models")

    lg = S.verify_lambda_g(tw, np.linspace(-0.9 * delta, 0.9 * delta, 31))
    _write_csv(out / "lambda_g.csv", ["branch", "max_discrepancy"], sorted(lg.per_branch.items()))
    files.append("lambda_g.csv")
    verdicts["lambda_g<=1e-8"] = lg.max_discrepancy <= 1e-8
    summary["lambda_g"] = lg.max_discrepancy

    b_values = tuple(sorted({0.5, 1.0, 2.0, b0}))
    tg = np.geomspace(1e-3, delta / 2, 8)
    hg = np.geomspace(1e-4, delta / 3, 8)
    kl = S.check_key_lemmas(tw, tg, hg, b_values)
    rows = [(bb, t, h, kl.mb_ratios[bb][i, j]) for bb in b_values for i, t in enumerate(tg) for j, h in enumerate(hg)]
    _write_csv(out / "modulus_Mb.csv", ["b", "t", "h", "ratio"], rows)
    files.append("modulus_Mb.csv")
    for bb in b_values:
        verdicts[f"modulus_b{bb}_max<=10median"] = kl.mb_sup[bb] <= 10 * kl.mb_median[bb]
        tables.append(_table(f"eigenvalue modulus M_b (b={bb})", "modulus_Mb.csv", kl.mb_ratios[bb].ravel()))
    verdicts["dlambda_gradient_rel<=1e-5"] = kl.grad_rel_error <= 1e-5
    law1: dict = {}
    for k, p in zip(tw.kappa[:, 0].tolist(), tw.measure.tolist()):
        law1[k] = law1.get(k, 0.0) + p
    symmetric = all(abs(p - law1.get(-N, 0.0)) < 1e-14 for N, p in law1.items())
    if symmetric:
        verdicts["dlambda_at_0<=1e-10"] = kl.dlambda_at_zero <= 1e-10
    summary.update(grad_rel_error=kl.grad_rel_error, dlambda_at_zero=kl.dlambda_at_zero)

    t_exp = np.geomspace(1e-4, min(0.2, delta), 20)
    lam = S.track_lambda(tw, [[t] for t in t_exp])
    r_exp_ratio = np.abs(1 - lam) / (t_exp**2 * np.log(1 / t_exp))
    _write_csv(out / "eigenvalue_expansion.csv", ["t", "ratio"], zip(t_exp, r_exp_ratio))
    files.append("eigenvalue_expansion.csv")
    tables.append(_table("eigenvalue expansion |lambda_0 - lambda_t| / (t^2 L(t))", "eigenvalue_expansion.csv", r_exp_ratio, t_exp))
    summary["expansion_max_over_min"] = float(r_exp_ratio.max() / r_exp_ratio.min())
    if heavy:
        verdicts["expansion_max_over_min<=3"] = r_exp_ratio.max() <= 3 * r_exp_ratio.min()
        s1 = S.fit_Sigma(tw, [[t] for t in np.geomspace(1e-4, 1e-3, 6)])
        s2 = S.fit_Sigma(tw, [[t] for t in np.geomspace(1e-3, 1e-2, 6)])
        rel = abs(s1.Sigma[0, 0] - s2.Sigma[0, 0]) / s2.Sigma[0, 0]
        summary["Sigma_decades"] = [float(s1.Sigma[0, 0]), float(s2.Sigma[0, 0])]
        verdicts["Sigma_decades_within_25%"] = rel <= 0.25

    ns = [n for n in cfg.n_values if 16 <= n <= 10_000] or [16, 64, 256, 1024, 4096]
    rows = []
    for beta, rexp in ((0, 0), (2, 1), (4, 2)):
        cur = S.quadrature_cor_int(tw, beta, rexp, ns, delta=delta)
        rows += [(beta, rexp, n, v, r) for n, v, r in zip(cur.n_grid, cur.integrals, cur.ratios)]
        verdicts[f"cor_int_beta{beta}_r{rexp}_max<=5median"] = cur.max_over_median <= 5
        tables.append(_table(f"integrated |lambda|^n (beta={beta}, r={rexp})", "cor_int.csv", cur.ratios, cur.n_grid))
    _write_csv(out / "cor_int.csv", ["beta", "r", "n", "integral", "ratio"], rows)
    files.append("cor_int.csv")

    if tw.n_states <= S.DENSE_MAX:
        ker = S.smoothing_kernel(delta, 1)
        rows = []
        for n in ns[:6]:
            an = B.a_n(n)
            for N in (0, int(math.ceil(an)), int(math.ceil(4 * an))):
                res = S.compute_A_nN(tw, n, N, ker, omega=cfg.bounds["omega"], eps1=cfg.bounds["eps1"])
                rows.append((n, N, res.norm, res.norm_ratio, res.decay_ratio, res.regime))
        _write_csv(out / "A_nN.csv", ["n", "N", "norm", "norm_ratio", "decay_ratio", "regime"], rows)
        files.append("A_nN.csv")
        c61 = [r for r in rows if r[1] == 0]
        tables.append(_table("A_nN norm times a_n^d", "A_nN.csv", [r[3] for r in c61], [r[0] for r in c61]))
        decay = [r for r in rows if r[1] > 0]
        tables.append(_table("A_nN decay |N|^2 a_n / (n log|N|)", "A_nN.csv", [r[4] for r in decay], [r[0] for r in decay]))
    return files, verdicts, tables, summary


def _pipe_abstract(cfg, out):
    name, base = resolve_model(cfg)
    tw = T.build_tower(base)
    laws = {n: T.exact_displacement_law(tw, n) for n in cfg.n_values}
    rep = B.exact_ratio_table(laws, tw.dimension, "abstract", omega=cfg.bounds["omega"], eps1=cfg.bounds["eps1"],
                              C=cfg.bounds["C"], min_prob=1e-12, max_scale=cfg.options.get("max_scale", 4.0))
    rep.to_csv(out / "abstract_ratios.csv")
    s = rep.summary()
    verdicts = {"abstract_max_over_median<=10": bool(s["max_over_median"] <= 10.0)}
    tables = [{"inequality": "abstract bound (ell3 = ell2 = log)", "file": "abstract_ratios.csv", "sup": s["max"],
               "median": s["median"], "slope": s["slope_median"]}]
    pt = T.psi_tail_curve(base)
    _write_csv(out / "psi_tail.csv", ["m", "tail", "m2_tail", "envelope", "tail_over_envelope"],
               zip(pt.m, pt.tail, pt.m**2 * pt.tail, pt.envelope, pt.tail / pt.envelope))
    tables.append(_table("psi tail m^2 mu_Y(psi>m)", "psi_tail.csv", pt.m**2 * pt.tail, pt.m))
    tables.append(_table("psi tail envelope", "psi_tail.csv", pt.tail / pt.envelope, pt.m))
    verdicts["psi_envelope_finite"] = math.isfinite(pt.envelope_ratio)
    if name.startswith("heavy-") and name[6:].isdigit():
        c = T.heavy_tailed_normalization(int(name[6:]))
        verdicts["sup_m2_psi_tail<=c"] = pt.sup_m2_tail <= c
    a3 = B.check_ass3(B.ONE, B.LOG, np.geomspace(2, 1e8, 60))
    verdicts["ell1_ell2_ratio_bounded"] = a3.ok
    s.update(model=name, sup_m2_psi_tail=pt.sup_m2_tail, envelope_ratio=pt.envelope_ratio)
    return ["abstract_ratios.csv", "psi_tail.csv"], verdicts, tables, s


PIPELINES = {"tail": _pipe_tail, "billiard-lld": _pipe_lld, "billiard-clt": _pipe_clt,
             "corridor-corr": _pipe_corr, "renewal": _pipe_renewal, "spectral": _pipe_spectral,
             "abstract": _pipe_abstract}


def run(cfg: ExperimentConfig) -> RunRecord:
    """Run the configured mode, write outputs under ``cfg.output_dir`` and return the record.

    Data files depend only on the config (worker count aside), so re-running
    reproduces them byte for byte; timestamps live only in the run record.
    """
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    try:
        files, verdicts, tables, summary = PIPELINES[cfg.mode](cfg, out)
    except Exception as exc:
        raise RuntimeError(f"mode {cfg.mode} failed: {exc}") from exc
    verdicts = {k: bool(v) for k, v in verdicts.items()}
    rec = RunRecord(cfg.digest(), _version(), cfg.mode, started, _now(), ["config.json"] + files, verdicts,
                    tables, json.loads(json.dumps(summary, default=_plain)))
    rec.save(out)
    return rec


# ----------------------------------------------------------------------------
# report


def report(in_dir: str | Path) -> Path:
    """Consolidate every run record below ``in_dir`` into ``report.md`` and ``report_tables.csv``.

    Raises
    ------
    MissingArtifacts
        If no run record exists, or a record lists files that are absent.
    """
    in_dir = Path(in_dir)
    if not in_dir.is_dir():
        raise MissingArtifacts([in_dir])
    records = sorted(in_dir.rglob(RECORD_NAME))
    if not records:
        raise MissingArtifacts([in_dir / RECORD_NAME])
    missing = []
    loaded = []
    for path in records:
        rec = RunRecord.load(path)
        missing += [path.parent / f for f in rec.files if not (path.parent / f).exists()]
        loaded.append((path.parent, rec))
    if missing:
        raise MissingArtifacts(missing)
    lines = ["# Bound-ratio report", ""]
    rows = []
    for directory, rec in loaded:
        rel = directory.relative_to(in_dir).as_posix() or "."
        lines += [f"## {rel} ({rec.mode})", "", f"config digest `{rec.config_digest}`, version {rec.artifact_version}", ""]
        lines += ["| inequality | sup ratio | median ratio | trend slope | table |", "|---|---|---|---|---|"]
        for t in rec.tables:
            cells = [_cell(t.get(k)) for k in ("sup", "median", "slope")]
            lines.append(f"| {t['inequality']} | {cells[0]} | {cells[1]} | {cells[2]} | {t['file']} |")
            rows.append((rel, rec.mode, t["inequality"], t.get("sup"), t.get("median"), t.get("slope"), t["file"]))
        lines += ["", "| verdict | result |", "|---|---|"]
        lines += [f"| {k} | {'pass' if v else 'FAIL'} |" for k, v in rec.verdicts.items()]
        lines.append("")
    (in_dir / "report.md").write_text("\n".join(lines))
    with open(in_dir / "report_tables.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "mode", "inequality", "sup", "median", "slope", "file"])
        for r in rows:
            w.writerow(["" if x is None else _fmt(x) for x in r])
    return in_dir / "report.md"


def _cell(v) -> str:
    return "n/a" if v is None else f"{v:.4g}"


# ----------------------------------------------------------------------------
# oracles


def oracle(cfg: ExperimentConfig, out: Path) -> list[str]:
    """Brute-force reference values only: exact step law (lattice) and exact tower laws (model)."""
    from .billiard import exact_step_law

    out.mkdir(parents=True, exist_ok=True)
    files = []
    if cfg.lattice is not None:
        d = cfg.lattice.dimension
        rng = range(-3, 4)
        targets = list(rng) if d == 1 else [(a, b) for a in rng for b in rng]
        law = exact_step_law(cfg.lattice, targets)
        _write_csv(out / "oracle_step_law.csv", ["N", "mass", "error"],
                   [(json.dumps(_plain(k) if d == 1 else list(k)), law.masses[k], law.errors.get(k, law.error_bound))
                    for k in sorted(law.masses)])
        files.append("oracle_step_law.csv")
    if cfg.model is not None:
        _, base = resolve_model(cfg)
        tw = T.build_tower(base)
        rows = []
        for n in cfg.n_values:
            for N, p in sorted(T.exact_displacement_law(tw, n).items()):
                rows.append((n, json.dumps(_plain(N) if not isinstance(N, tuple) else list(N)), p))
        _write_csv(out / "oracle_tower_laws.csv", ["n", "N", "probability"], rows)
        files.append("oracle_tower_laws.csv")
    return files


# ----------------------------------------------------------------------------
# entry point


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lorentz-lld", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    v = sub.add_parser("validate", help="check a config file")
    v.add_argument("--config", required=True)
    r = sub.add_parser("run", help="run the experiment described by a config")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--workers", type=int)
    r.add_argument("--out")
    rp = sub.add_parser("report", help="consolidate run outputs into a report")
    rp.add_argument("--in", dest="in_dir", required=True)
    o = sub.add_parser("oracle", help="regenerate brute-force oracle fixtures")
    o.add_argument("--config", required=True)
    o.add_argument("--out")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "report":
            print(report(args.in_dir))
            return 0
        cfg = load_experiment(args.config)
        if args.command == "validate":
            print(f"ok: mode={cfg.mode} digest={cfg.digest()}")
            return 0
        if args.command == "oracle":
            out = Path(args.out) if args.out else cfg.output_dir
            for f in oracle(cfg, out):
                print(out / f)
            return 0
        if args.seed is not None:
            if not 0 <= args.seed < U64:
                raise ConfigError(f"--seed: must be an unsigned 64-bit integer, got {args.seed}")
            cfg.seed = args.seed
        if args.workers is not None:
            if args.workers < 1:
                raise ConfigError("--workers: must be positive")
            cfg.worker_override = args.workers
        if args.out:
            cfg.output_dir = Path(args.out)
        rec = run(cfg)
        for k, v in rec.verdicts.items():
            print(f"{'pass' if v else 'FAIL'}  {k}")
        return 0 if rec.ok else 2
    except ConfigError as exc:
        for p in exc.problems:
            print(f"config error: {p}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every failure maps to exit code 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
