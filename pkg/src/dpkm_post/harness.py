"""Experiment protocol: WCSS of DP-KMEANS versus MCMC post-processing over epsilon.

Every (epsilon, repetition) cell runs the mechanism once and post-processes
that single trace, so both methods are scored on the same released
statistics. The MCMC path never touches the dataset; it is read again only
to report WCSS.

Output files in the results directory:

``runs.csv``
    epsilon, rep, seed, status, wcss_dpkm, wcss_mcmc, acceptance_rate
``timings.csv``
    epsilon, rep, wall_time_ms
``summary.csv``
    epsilon, n_ok, mean_wcss_dpkm, std_wcss_dpkm, mean_wcss_mcmc,
    std_wcss_mcmc, mean_acceptance_rate
``metadata.json``
    the configuration plus the L1 scaling factor applied by ``normalize``
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .consistency import enforce_consistency
from .core import normalize, wcss
from .dp_mechanism import default_min_sep, dp_kmeans, init_centroids
from .mcmc import final_centroids, run_chain

log = logging.getLogger(__name__)

RUN_COLUMNS = ["epsilon", "rep", "seed", "status", "wcss_dpkm", "wcss_mcmc", "acceptance_rate"]
TIMING_COLUMNS = ["epsilon", "rep", "wall_time_ms"]
SUMMARY_COLUMNS = ["epsilon", "n_ok", "mean_wcss_dpkm", "std_wcss_dpkm",
                   "mean_wcss_mcmc", "std_wcss_mcmc", "mean_acceptance_rate"]


class DatasetError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def load_csv(path, header: bool = False) -> np.ndarray:
    """Read a numeric CSV (one point per row) and normalize it."""
    path = Path(path)
    rows = []
    width = None
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if header and lineno == 1:
                continue
            if not row or all(not cell.strip() for cell in row):
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DatasetError(f"{path}:{lineno}: expected {width} fields, found {len(row)}")
            try:
                values = [float(cell) for cell in row]
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: non-numeric field in {row!r}") from None
            if not all(math.isfinite(v) for v in values):
                raise DatasetError(f"{path}:{lineno}: missing or non-finite value")
            rows.append(values)
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    return normalize(np.array(rows))


def gen_blobs(N: int, d: int, K_true: int, spread: float = 0.03, seed=0,
              normalized: bool = True) -> np.ndarray:
    """Isotropic Gaussian blobs around K_true random centers in [0, 1]^d.

    Points are split evenly, earlier blobs taking the remainder.
    """
    if K_true < 1 or d < 1 or N < K_true:
        raise ValueError("need N >= K_true >= 1 and d >= 1")
    if spread < 0:
        raise ValueError("spread must be non-negative")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.0, 1.0, size=(K_true, d))
    sizes = np.full(K_true, N // K_true)
    sizes[: N % K_true] += 1
    raw = np.repeat(centers, sizes, axis=0) + spread * rng.standard_normal((N, d))
    return normalize(raw) if normalized else raw


@dataclass
class ExperimentConfig:
    K: int
    data_path: str | None = None
    blobs: tuple[int, int, int] | None = None
    blob_spread: float = 0.03
    header: bool = False
    T: int = 5
    epsilons: list[float] = field(default_factory=lambda: [0.05, 0.1, 0.2, 0.5, 1.0])
    repetitions: int = 10
    chain_steps: int = 30_000
    delta: float = 0.001
    lloyd_restarts: int = 10
    min_sep: float | None = None
    seed: int = 0
    skip_consistency: bool = False
    ball_projection: bool = True
    workers: int = 1

    def validate(self) -> None:
        if (self.data_path is None) == (self.blobs is None):
            raise ConfigError("give exactly one of a data path or a blob spec")
        positive = {"K": self.K, "T": self.T, "repetitions": self.repetitions,
                    "chain_steps": self.chain_steps, "lloyd_restarts": self.lloyd_restarts,
                    "workers": self.workers}
        for name, value in positive.items():
            if value < 1:
                raise ConfigError(f"{name} must be positive, got {value}")
        if not self.epsilons or any(not e > 0 for e in self.epsilons):
            raise ConfigError("epsilons must be a non-empty list of positive numbers")
        if not self.delta > 0:
            raise ConfigError("delta must be positive")
        if self.min_sep is not None and self.min_sep < 0:
            raise ConfigError("min_sep must be non-negative")
        if self.blobs is not None:
            N, d, k = self.blobs
            if k < 1 or d < 1 or N < k:
                raise ConfigError(f"bad blob spec {self.blobs}")


@dataclass(frozen=True)
class RunRecord:
    epsilon: float
    rep: int
    seed: int
    status: str
    wcss_dpkm: float
    wcss_mcmc: float
    acceptance_rate: float
    wall_time_ms: float


@dataclass
class ExperimentResult:
    records: list[RunRecord]
    summary: list[dict]
    metadata: dict


def cell_seed(master: int, eps_index: int, rep: int) -> int:
    return int(np.random.SeedSequence([master, eps_index, rep]).generate_state(1, np.uint64)[0])


def load_dataset(config: ExperimentConfig) -> np.ndarray:
    if config.blobs is not None:
        N, d, k = config.blobs
        return gen_blobs(N, d, k, config.blob_spread, seed=config.seed)
    return load_csv(config.data_path, header=config.header)


def run_cell(data: np.ndarray, config: ExperimentConfig, eps_index: int, rep: int) -> RunRecord:
    """Mechanism, post-processing and scoring for one (epsilon, rep) cell."""
    eps = config.epsilons[eps_index]
    seed = cell_seed(config.seed, eps_index, rep)
    start = time.perf_counter()
    try:
        mech_seq, post_seq = np.random.SeedSequence(seed).spawn(2)
        mech_rng = np.random.default_rng(mech_seq)
        post_rng = np.random.default_rng(post_seq)
        K, d = config.K, data.shape[1]
        min_sep = default_min_sep(K, d) if config.min_sep is None else config.min_sep

        init = init_centroids(K, d, min_sep, mech_rng)
        trace = dp_kmeans(data, K, config.T, eps, init, mech_rng)
        wcss_dpkm = wcss(data, trace.final_centroids)

        released = trace if config.skip_consistency else enforce_consistency(trace)
        chain = run_chain(released, config.chain_steps, config.delta, post_rng,
                          project=config.ball_projection)
        cents, _ = final_centroids(chain.best_data, K, config.lloyd_restarts, post_rng)
        wcss_mcmc = wcss(data, cents)
        status, acc = "ok", chain.acceptance_rate
    except (ValueError, RuntimeError, FloatingPointError) as exc:
        log.warning("cell eps=%s rep=%d failed: %s", eps, rep, exc)
        status, wcss_dpkm, wcss_mcmc, acc = "failed", math.nan, math.nan, math.nan
    elapsed = (time.perf_counter() - start) * 1000.0
    return RunRecord(float(eps), rep, seed, status, wcss_dpkm, wcss_mcmc, acc, elapsed)


def _run_cell_args(args):
    return run_cell(*args)


def summarize(records: list[RunRecord]) -> list[dict]:
    """Per-epsilon means and population standard deviations over ok cells."""
    out = []
    for eps in dict.fromkeys(r.epsilon for r in records):
        ok = [r for r in records if r.epsilon == eps and r.status == "ok"]
        row = {"epsilon": eps, "n_ok": len(ok)}
        for name in ("wcss_dpkm", "wcss_mcmc"):
            vals = np.array([getattr(r, name) for r in ok])
            row[f"mean_{name}"] = float(vals.mean()) if len(ok) else math.nan
            row[f"std_{name}"] = float(vals.std()) if len(ok) else math.nan
        acc = np.array([r.acceptance_rate for r in ok])
        row["mean_acceptance_rate"] = float(acc.mean()) if len(ok) else math.nan
        out.append(row)
    return out


def metadata(config: ExperimentConfig, data: np.ndarray) -> dict:
    return {
        "version": __version__,
        "config": dataclasses.asdict(config),
        "N": int(data.shape[0]),
        "d": int(data.shape[1]),
        "l1_projection": "per-attribute [-1, 1] then uniform scaling",
        "l1_scale_factor": 1.0 / data.shape[1],
    }


def _fmt(value) -> str:
    # str() of a float is its shortest round-trip repr
    return str(value)


class ResultWriter:
    """Appends run and timing rows as cells finish."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._runs = (self.out_dir / "runs.csv").open("w", newline="", encoding="utf-8")
        self._times = (self.out_dir / "timings.csv").open("w", newline="", encoding="utf-8")
        self._run_w = csv.writer(self._runs, lineterminator="\n")
        self._time_w = csv.writer(self._times, lineterminator="\n")
        self._run_w.writerow(RUN_COLUMNS)
        self._time_w.writerow(TIMING_COLUMNS)

    def add(self, rec: RunRecord) -> None:
        self._run_w.writerow([_fmt(getattr(rec, c)) for c in RUN_COLUMNS])
        self._time_w.writerow([_fmt(getattr(rec, c)) for c in TIMING_COLUMNS])
        self._runs.flush()
        self._times.flush()

    def close(self) -> None:
        self._runs.close()
        self._times.close()


def write_summary(summary: list[dict], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for row in summary:
            w.writerow([_fmt(row[c]) for c in SUMMARY_COLUMNS])


def emit_results(result: ExperimentResult, out_dir) -> None:
    """Write every output file for a finished experiment."""
    writer = ResultWriter(out_dir)
    try:
        for rec in result.records:
            writer.add(rec)
    finally:
        writer.close()
    _finish(result, Path(out_dir))


def _finish(result: ExperimentResult, out_dir: Path) -> None:
    write_summary(result.summary, out_dir / "summary.csv")
    with (out_dir / "metadata.json").open("w", encoding="utf-8") as fh:
        json.dump(result.metadata, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_runs(path) -> list[RunRecord]:
    """Parse a ``runs.csv`` back into records (wall time is not stored there)."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RUN_COLUMNS:
            raise DatasetError(f"{path}: unexpected columns {reader.fieldnames}")
        return [RunRecord(epsilon=float(r["epsilon"]), rep=int(r["rep"]), seed=int(r["seed"]),
                          status=r["status"], wcss_dpkm=float(r["wcss_dpkm"]),
                          wcss_mcmc=float(r["wcss_mcmc"]),
                          acceptance_rate=float(r["acceptance_rate"]), wall_time_ms=math.nan)
                for r in reader]


def run_experiment(config: ExperimentConfig, out_dir=None, data: np.ndarray | None = None
                   ) -> ExperimentResult:
    """Sweep epsilons x repetitions; with ``out_dir``, write rows as cells finish."""
    config.validate()
    if data is None:
        data = load_dataset(config)
    cells = [(data, config, ei, rep)
             for ei in range(len(config.epsilons)) for rep in range(config.repetitions)]
    writer = ResultWriter(out_dir) if out_dir is not None else None
    records = []
    try:
        if config.workers > 1:
            with ProcessPoolExecutor(config.workers) as pool:
                results = pool.map(_run_cell_args, cells)
                for rec in results:
                    records.append(rec)
                    if writer:
                        writer.add(rec)
        else:
            for cell in cells:
                rec = run_cell(*cell)
                log.info("eps=%s rep=%d dpkm=%.6g mcmc=%.6g", rec.epsilon, rec.rep,
                         rec.wcss_dpkm, rec.wcss_mcmc)
                records.append(rec)
                if writer:
                    writer.add(rec)
    finally:
        if writer:
            writer.close()
    result = ExperimentResult(records, summarize(records), metadata(config, data))
    if out_dir is not None:
        _finish(result, Path(out_dir))
    return result
