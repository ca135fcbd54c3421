"""Monte Carlo simulation harness: mixture generation, trial execution,
success-rate/SIR scoring, sweep orchestration and CSV/JSON output.

A trial draws a ``d x d`` mixture whose first two columns are phase-shift
steering vectors (the source of interest and a structured competitor) while
the remaining entries are random unit-modulus phases.  All methods inside a
trial see identical data and an identical initialization.
"""

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from . import baselines, bounds, capon_ice, core
from .core import SnapshotMatrix, complex_gaussian, complex_laplacean, laplacean_score

SUCCESS_SIR_DB = 3.0
SIR_CAP_DB = 150.0
DEFAULT_COMPETITOR = 0.25
CSV_HEADER = (
    "grid_param,method,trial,seed,lambda_star,isir_db,lambda_hat,"
    "sir_out_db,success,iterations,runtime_s"
)
KNOWN_METHODS = ("caponice", "fastica", "musicmpdr", "espritmpdr", "ini")
# number of plane-wave sources in the mixture model (SOI + structured competitor)
STRUCTURED_SOURCES = 2


@dataclass(frozen=True)
class MixtureSpec:
    """Parameters of one synthetic mixture."""

    d: int
    N: int
    lambda_star: float
    isir_db: float
    lambda_competitor: float = DEFAULT_COMPETITOR
    source_law: str = "laplacean"
    seed: int = 0

    def __post_init__(self):
        if self.d < 3:
            raise ValueError("competitor construction needs d >= 3")
        if not math.isfinite(self.isir_db):
            raise ValueError("isir_db must be finite")
        if self.source_law not in ("laplacean", "gaussian"):
            raise ValueError(f"unknown source law {self.source_law!r}")


@dataclass(frozen=True)
class TrialRecord:
    """Outcome of one (mixture, method) pair."""

    spec: MixtureSpec
    grid_value: float
    method: str
    trial: int
    lambda_hat: float
    sir_out_db: float
    success: bool
    iterations: int
    runtime_s: float
    converged: bool = True


def _source_sampler(law: str):
    return complex_laplacean if law == "laplacean" else complex_gaussian


def draw_sources(spec: MixtureSpec) -> np.ndarray:
    """Unit-variance source matrix ``d x N`` for the spec's seed and law."""
    rng = np.random.default_rng(spec.seed)
    rng.random((spec.d, spec.d))  # consume the mixing-matrix draw
    sample = _source_sampler(spec.source_law)
    return np.vstack([sample(rng, spec.N) for _ in range(spec.d)])


def source_powers(spec: MixtureSpec) -> np.ndarray:
    """SOI power 1; equal interferer powers summing to ``10^(-iSIR/10)``."""
    p_int = 10.0 ** (-spec.isir_db / 10.0)
    return np.r_[1.0, np.full(spec.d - 1, p_int / (spec.d - 1))]


def generate_mixture(spec: MixtureSpec):
    """Draw ``(x, A, powers)`` deterministically from ``spec.seed``.

    Columns 1 and 2 of ``A`` are the steering vectors of the SOI and the
    structured competitor; every other entry is a random unit-modulus phase.
    Channel-wise input SIR equals ``spec.isir_db`` exactly in expectation
    because all mixing entries have unit modulus.
    """
    rng = np.random.default_rng(spec.seed)
    model = core.ula(spec.d)
    a = np.exp(2j * np.pi * rng.random((spec.d, spec.d)))
    a[:, 0] = core.steering(model, spec.lambda_star)
    a[:, 1] = core.steering(model, spec.lambda_competitor)
    sample = _source_sampler(spec.source_law)
    u = np.vstack([sample(rng, spec.N) for _ in range(spec.d)])
    powers = source_powers(spec)
    x = a @ (np.sqrt(powers)[:, None] * u)
    return SnapshotMatrix(x), a, powers


def output_sir(
    w: np.ndarray, a: np.ndarray, powers: np.ndarray, soi_index: int = 0
) -> float:
    """Beamformer output SIR in dB, capped to +-150:

        10 log10( |w^H a_soi|^2 p_soi / sum_{j != soi} |w^H a_j|^2 p_j )
    """
    gains = np.abs(w.conj() @ a) ** 2 * powers
    soi = gains[soi_index]
    interference = float(np.sum(gains) - soi)
    if soi <= 0.0:
        return -SIR_CAP_DB
    if interference <= 0.0:
        return SIR_CAP_DB
    return float(np.clip(10.0 * np.log10(soi / interference), -SIR_CAP_DB, SIR_CAP_DB))


def output_isr(w: np.ndarray, a: np.ndarray, powers: np.ndarray, soi_index: int = 0) -> float:
    """Linear interference-to-signal ratio of the beamformer output."""
    return 10.0 ** (-output_sir(w, a, powers, soi_index) / 10.0)


def measured_isir_db(spec: MixtureSpec) -> float:
    """Channel-averaged input SIR of the actually generated data."""
    _, a, powers = generate_mixture(spec)
    u = draw_sources(spec)
    sample_var = np.mean(np.abs(u) ** 2, axis=1)
    per_source = powers * sample_var
    gains = np.abs(a) ** 2 * per_source  # d x d channel/source powers
    soi = gains[:, 0]
    interference = gains[:, 1:].sum(axis=1)
    return float(np.mean(10.0 * np.log10(soi / interference)))


def trial_seed_sequence(master_seed: int, grid_index: int, trial_index: int):
    """Deterministic per-trial seed material, shared by all methods.

    The data and the initialization draw come from separate child streams
    so adding methods never perturbs the data."""
    ss = np.random.SeedSequence([int(master_seed), int(grid_index), int(trial_index)])
    data_ss, ini_ss = ss.spawn(2)
    seed = int(data_ss.generate_state(1, np.uint64)[0])
    return seed, ini_ss


def _run_method(method, x, a, powers, model, phi, lam_star, lam_ini):
    """Execute one method; returns (lambda_hat, w, iterations, converged)."""
    if method == "caponice":
        cfg = capon_ice.CaponConfig(lambda_ini=lam_ini)
        res = capon_ice.run(x, model, phi, cfg, keep_trace=False)
        return res.state.lam, res.state.w, res.iterations, res.converged
    if method == "fastica":
        c_x = core.sample_covariance(x)
        w_ini, _ = core.mpdr_weights(c_x, core.steering(model, lam_ini))
        res = baselines.fastica_one_unit(x, phi, w_ini)
        return float("nan"), res.state.w, res.iterations, res.converged
    if method in ("musicmpdr", "espritmpdr"):
        c_x = core.sample_covariance(x)
        estimator = baselines.root_music if method == "musicmpdr" else baselines.tls_esprit
        est = estimator(c_x, STRUCTURED_SOURCES)
        cands = est.candidates if est.candidates.size else np.array([est.lambda_hat])
        lam_hat = float(cands[np.argmin(np.abs(cands - lam_ini))])
        w, _ = core.mpdr_weights(c_x, core.steering(model, lam_hat))
        return lam_hat, w, 0, True
    if method == "ini":
        c_x = core.sample_covariance(x)
        w, _ = core.mpdr_weights(c_x, core.steering(model, lam_ini))
        return lam_ini, w, 0, True
    raise ValueError(f"unknown method {method!r}")


def run_trial(
    spec: MixtureSpec,
    methods: Sequence[str],
    grid_value: float,
    trial_index: int,
    ini_seed,
    ini_radius: float = 0.1,
):
    """Run all methods on one mixture; failures are recorded, never raised."""
    x, a, powers = generate_mixture(spec)
    model = core.ula(spec.d)
    phi = core.rational_nonlinearity()
    rng_ini = np.random.default_rng(ini_seed)
    lam_ini = spec.lambda_star + rng_ini.uniform(-ini_radius, ini_radius)
    records = []
    for method in methods:
        t0 = time.perf_counter()
        try:
            lam_hat, w, iters, conv = _run_method(
                method, x, a, powers, model, phi, spec.lambda_star, lam_ini
            )
            sir = output_sir(w, a, powers)
        except Exception:
            lam_hat, sir, iters, conv = float("nan"), -SIR_CAP_DB, 0, False
        runtime = time.perf_counter() - t0
        records.append(
            TrialRecord(
                spec=spec,
                grid_value=grid_value,
                method=method,
                trial=trial_index,
                lambda_hat=lam_hat,
                sir_out_db=sir,
                success=sir > SUCCESS_SIR_DB,
                iterations=iters,
                runtime_s=runtime,
                converged=conv,
            )
        )
    return records


def run_sweep(
    base: MixtureSpec,
    grid_param: str,
    grid_values: Sequence[float],
    methods: Sequence[str],
    trials: int,
    master_seed: int = 0,
    ini_radius: float = 0.1,
    threads: int = 1,
):
    """Sweep ``grid_param`` (``lambda_star`` or ``isir_db``) over
    ``grid_values``; every grid point runs ``trials`` independent mixtures.

    Returns records sorted by (grid index, trial, method) regardless of the
    execution order, so output is deterministic for any thread count.
    """
    if grid_param not in ("lambda_star", "isir_db"):
        raise ValueError(f"unknown grid parameter {grid_param!r}")
    for m in methods:
        if m not in KNOWN_METHODS:
            raise ValueError(f"unknown method {m!r}")
    if not methods:
        return []

    tasks = []
    for gi, gv in enumerate(grid_values):
        for ti in range(trials):
            seed, ini_ss = trial_seed_sequence(master_seed, gi, ti)
            spec = MixtureSpec(
                d=base.d,
                N=base.N,
                lambda_star=float(gv) if grid_param == "lambda_star" else base.lambda_star,
                isir_db=float(gv) if grid_param == "isir_db" else base.isir_db,
                lambda_competitor=base.lambda_competitor,
                source_law=base.source_law,
                seed=seed,
            )
            tasks.append((gi, ti, gv, spec, ini_ss))

    def execute(task):
        gi, ti, gv, spec, ini_ss = task
        return gi, run_trial(spec, methods, float(gv), ti, ini_ss, ini_radius)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(execute, tasks))
    else:
        results = [execute(t) for t in tasks]

    flat = []
    method_order = {m: i for i, m in enumerate(methods)}
    for gi, recs in results:
        for r in recs:
            flat.append((gi, r.trial, method_order[r.method], r))
    flat.sort(key=lambda item: item[:3])
    return [item[3] for item in flat]


def _fmt(value) -> str:
    if isinstance(value, float):
        return "nan" if math.isnan(value) else f"{value:.9g}"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def write_csv(records: Iterable[TrialRecord], path):
    """One row per record, schema fixed by :data:`CSV_HEADER`."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER.split(","))
        for r in records:
            writer.writerow(
                [
                    _fmt(r.grid_value),
                    r.method,
                    r.trial,
                    r.spec.seed,
                    _fmt(r.spec.lambda_star),
                    _fmt(r.spec.isir_db),
                    _fmt(r.lambda_hat),
                    _fmt(r.sir_out_db),
                    _fmt(r.success),
                    r.iterations,
                    _fmt(r.runtime_s),
                ]
            )


def generator_kappa_bar(n: int = 1_000_000, seed: int = 12345):
    """Empirical kappa_bar of the Laplacean source generator (exact value 2)."""
    samples = complex_laplacean(np.random.default_rng(seed), n)
    value = bounds.empirical_kappa_bar(samples, laplacean_score)
    stderr = bounds.empirical_kappa_bar_stderr(samples, laplacean_score)
    return value, stderr


def aggregate(records: Sequence[TrialRecord], d: int, N: int, kappa_bar: Optional[float] = None):
    """Per (grid point, method) success rate and mean successful-trial SIR,
    with the reference bounds attached.

    ``kappa_bar`` defaults to the empirical value of the Laplacean
    generator; the exact value for that law is 2.
    """
    if kappa_bar is None:
        kappa_bar, kb_stderr = generator_kappa_bar()
    else:
        kb_stderr = 0.0
    report = bounds.crib_report(kappa_bar, d, N)
    by_point = {}
    for r in records:
        point = by_point.setdefault(r.grid_value, {})
        point.setdefault(r.method, []).append(r)
    points = []
    for gv in sorted(by_point):
        methods_out = {}
        for method, recs in sorted(by_point[gv].items()):
            sirs = np.array([r.sir_out_db for r in recs if r.success])
            isrs = 10.0 ** (-sirs / 10.0)
            n_s = int(sirs.size)
            methods_out[method] = {
                "trials": len(recs),
                "n_success": n_s,
                "success_rate": n_s / len(recs),
                "mean_sir_db": float(np.mean(sirs)) if n_s else None,
                "mean_isr": float(np.mean(isrs)) if n_s else None,
                "isr_stderr": float(np.std(isrs, ddof=1) / np.sqrt(n_s)) if n_s > 1 else None,
            }
        points.append({"grid_value": float(gv), "methods": methods_out})
    return {
        "d": d,
        "N": N,
        "kappa_bar": kappa_bar,
        "kappa_bar_stderr": kb_stderr,
        "crib_ice": report.crib_ice,
        "crib_capon": report.crib_capon,
        "crib_ice_db": report.crib_ice_db,
        "crib_capon_db": report.crib_capon_db,
        "points": points,
    }

