"""
Closed-loop HTTP load generation and the sweep/repetition methodology.

`connections` workers each keep exactly one request in flight and send the
next one only after the previous response body has been read. Warmup
requests are discarded. Every repetition records its monotonic start/end so
resource samples taken alongside can be sliced to the same window.
"""

import asyncio
import logging
import math
import os
import ssl
import tempfile
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Self

import httpx
import numpy as np
import polars as pl
from pydantic import BaseModel, ConfigDict, Field, model_validator

from notebook_gate.errors import EmptySamples, TargetUnreachable
from notebook_gate.resources import ResourceSample, ResourceSampler, mean_cpu, peak_rss

logger = logging.getLogger(__name__)

RESULT_COLUMNS = [
    "connections",
    "repetition",
    "completed",
    "failed",
    "p50_ms",
    "p90_ms",
    "p99_ms",
    "max_ms",
    "throughput_rps",
    "mean_cpu_pct",
    "peak_rss_bytes",
]
MEDIAN_ROW = "median"


class LoadSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    target_url: str
    connections: int = Field(1, ge=1)
    duration: float | None = Field(None, gt=0)
    total_requests: int | None = Field(None, gt=0)
    warmup: float = Field(3.0, ge=0)
    repetitions: int = Field(3, ge=1)
    method: str = "GET"
    timeout: float = Field(30.0, gt=0)
    ca_cert: Path | None = None
    insecure: bool = False

    @model_validator(mode="after")
    def one_stop_condition(self) -> Self:
        if (self.duration is None) == (self.total_requests is None):
            raise ValueError("exactly one of duration or total_requests must be set")
        return self


def percentile(samples, p: float) -> float:
    """Nearest-rank percentile: the value at 1-based rank ceil(p/100 * n) of the sorted samples."""
    ordered = np.sort(np.asarray(samples, dtype=float))
    if ordered.size == 0:
        raise EmptySamples()
    if not 0 <= p <= 100:
        raise ValueError(f"percentile must be within 0..100, got {p}")
    rank = max(math.ceil(round(p / 100 * ordered.size, 9)), 1)
    return float(ordered[rank - 1])


@dataclass
class BenchResult:
    spec: LoadSpec
    completed: int
    failed: dict[str, int]
    wall_time: float
    latencies_ms: list[float]
    started_at: float = 0.0
    ended_at: float = 0.0
    repetition: int = 1
    mean_cpu_pct: float = 0.0
    peak_rss_bytes: int = 0

    @property
    def failed_total(self) -> int:
        return sum(self.failed.values())

    @property
    def attempted(self) -> int:
        return self.completed + self.failed_total

    def _pct(self, p: float) -> float:
        return percentile(self.latencies_ms, p) if self.latencies_ms else 0.0

    @property
    def p50(self) -> float:
        return self._pct(50)

    @property
    def p90(self) -> float:
        return self._pct(90)

    @property
    def p99(self) -> float:
        return self._pct(99)

    @property
    def max_ms(self) -> float:
        return max(self.latencies_ms, default=0.0)

    @property
    def throughput_rps(self) -> float:
        return self.completed / self.wall_time if self.wall_time > 0 else 0.0

    def row(self, repetition: str | None = None) -> dict:
        return {
            "connections": self.spec.connections,
            "repetition": repetition or str(self.repetition),
            "completed": self.completed,
            "failed": self.failed_total,
            "p50_ms": self.p50,
            "p90_ms": self.p90,
            "p99_ms": self.p99,
            "max_ms": self.max_ms,
            "throughput_rps": self.throughput_rps,
            "mean_cpu_pct": self.mean_cpu_pct,
            "peak_rss_bytes": self.peak_rss_bytes,
        }


# ═══════════════════════════════════════════════════════════
# Load loop
# ═══════════════════════════════════════════════════════════

@dataclass
class _Tally:
    latencies_ms: list[float] = field(default_factory=list)
    failed: Counter = field(default_factory=Counter)


class _Quota:
    """Remaining request count shared by the workers of one event loop."""

    def __init__(self, total: int | None):
        self.remaining = total

    def take(self) -> bool:
        if self.remaining is None:
            return True
        if self.remaining <= 0:
            return False
        self.remaining -= 1
        return True


def _client(spec: LoadSpec) -> httpx.AsyncClient:
    verify: bool | ssl.SSLContext = True
    if spec.insecure:
        verify = False
    elif spec.ca_cert is not None:
        verify = ssl.create_default_context(cafile=str(spec.ca_cert))
    return httpx.AsyncClient(
        timeout=spec.timeout,
        limits=httpx.Limits(max_connections=spec.connections, max_keepalive_connections=spec.connections),
        verify=verify,
        trust_env=False,
    )


async def _worker(client: httpx.AsyncClient, spec: LoadSpec, stop_at: float | None, quota: _Quota) -> _Tally:
    tally = _Tally()
    while True:
        if stop_at is not None and time.perf_counter() >= stop_at:
            break
        if not quota.take():
            break
        t0 = time.perf_counter()
        try:
            response = await client.request(spec.method, spec.target_url)
        except httpx.TimeoutException:
            tally.failed["timeout"] += 1
            continue
        except httpx.ConnectError:
            tally.failed["connect"] += 1
            continue
        except httpx.TransportError:
            tally.failed["transport"] += 1
            continue
        elapsed_ms = (time.perf_counter() - t0) * 1000
        if response.status_code >= 400:
            tally.failed[f"http_{response.status_code}"] += 1
        else:
            tally.latencies_ms.append(elapsed_ms)
    return tally


async def _phase(client: httpx.AsyncClient, spec: LoadSpec, stop_at: float | None, quota: _Quota) -> list[_Tally]:
    return await asyncio.gather(*(_worker(client, spec, stop_at, quota) for _ in range(spec.connections)))


async def _check_reachable(client: httpx.AsyncClient, spec: LoadSpec) -> None:
    try:
        await client.request(spec.method, spec.target_url)
    except httpx.TransportError as e:
        raise TargetUnreachable(spec.target_url, repr(e)) from e


async def measure(spec: LoadSpec, repetition: int = 1) -> BenchResult:
    """One repetition: reachability check, warm up, then the measured closed-loop phase."""
    async with _client(spec) as client:
        await _check_reachable(client, spec)
        if spec.warmup > 0:
            await _phase(client, spec, time.perf_counter() + spec.warmup, _Quota(None))

        started_at = time.monotonic()
        t0 = time.perf_counter()
        stop_at = t0 + spec.duration if spec.duration is not None else None
        tallies = await _phase(client, spec, stop_at, _Quota(spec.total_requests))
        wall_time = time.perf_counter() - t0
        ended_at = time.monotonic()

    latencies = [ms for tally in tallies for ms in tally.latencies_ms]
    failed: Counter = Counter()
    for tally in tallies:
        failed.update(tally.failed)

    result = BenchResult(
        spec=spec,
        completed=len(latencies),
        failed=dict(failed),
        wall_time=wall_time,
        latencies_ms=latencies,
        started_at=started_at,
        ended_at=ended_at,
        repetition=repetition,
    )
    logger.info(
        f"[BENCH] c={spec.connections} rep={repetition} completed={result.completed} failed={result.failed_total} "
        f"p50={result.p50:.2f}ms p99={result.p99:.2f}ms rps={result.throughput_rps:.1f}"
    )
    return result


def run_repetitions(spec: LoadSpec) -> list[BenchResult]:
    async def _all() -> list[BenchResult]:
        return [await measure(spec, rep) for rep in range(1, spec.repetitions + 1)]

    return asyncio.run(_all())


def median_run(results: list[BenchResult]) -> BenchResult:
    """The run with median throughput (lower median for an even count)."""
    ordered = sorted(results, key=lambda r: r.throughput_rps)
    return ordered[(len(ordered) - 1) // 2]


def run_load(spec: LoadSpec) -> BenchResult:
    return median_run(run_repetitions(spec))


# ═══════════════════════════════════════════════════════════
# Sweeps
# ═══════════════════════════════════════════════════════════

@dataclass
class LevelRun:
    connections: int
    runs: list[BenchResult]

    @property
    def median(self) -> BenchResult:
        return median_run(self.runs)


def attach_resources(result: BenchResult, samples: dict[str, list[ResourceSample]]) -> None:
    """Stack totals for one repetition window: CPU summed over processes, peak RSS summed too."""
    result.mean_cpu_pct = sum(mean_cpu(s) for s in samples.values())
    result.peak_rss_bytes = sum(peak_rss(s) for s in samples.values())


def run_sweep(levels: list[int], base_spec: LoadSpec, sampler: ResourceSampler | None = None) -> list[LevelRun]:
    """Run every connection level with the base spec's repetitions, sampling resources if asked."""
    if not levels:
        raise ValueError("a sweep needs at least one connection level")
    if sampler is not None:
        sampler.start()
    try:
        sweep = [
            LevelRun(level, run_repetitions(base_spec.model_copy(update={"connections": level})))
            for level in levels
        ]
    finally:
        if sampler is not None:
            sampler.stop()

    if sampler is not None:
        for level in sweep:
            for result in level.runs:
                attach_resources(result, sampler.window(result.started_at, result.ended_at))
    return sweep


def results_frame(sweep: list[LevelRun]) -> pl.DataFrame:
    rows = []
    for level in sweep:
        rows.extend(result.row() for result in level.runs)
        rows.append(level.median.row(MEDIAN_ROW))
    return pl.DataFrame(rows, schema={
        "connections": pl.Int64,
        "repetition": pl.Utf8,
        "completed": pl.Int64,
        "failed": pl.Int64,
        "p50_ms": pl.Float64,
        "p90_ms": pl.Float64,
        "p99_ms": pl.Float64,
        "max_ms": pl.Float64,
        "throughput_rps": pl.Float64,
        "mean_cpu_pct": pl.Float64,
        "peak_rss_bytes": pl.Int64,
    })


def samples_frame(samples: dict[str, list[ResourceSample]]) -> pl.DataFrame:
    rows = [
        {"label": label, "t": s.t, "cpu_percent": s.cpu_percent, "rss_bytes": s.rss_bytes}
        for label, series in samples.items()
        for s in series
    ]
    return pl.DataFrame(rows, schema={"label": pl.Utf8, "t": pl.Float64, "cpu_percent": pl.Float64, "rss_bytes": pl.Int64})


def write_csv_atomic(df: pl.DataFrame, path: str | os.PathLike) -> Path:
    """Write to a temp file beside `path` and rename over it, so readers never see a partial CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        df.write_csv(tmp)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def write_results_csv(sweep: list[LevelRun], path: str | os.PathLike) -> Path:
    return write_csv_atomic(results_frame(sweep), path)


def write_samples_csv(samples: dict[str, list[ResourceSample]], path: str | os.PathLike) -> Path:
    return write_csv_atomic(samples_frame(samples), path)


def read_results_csv(path: str | os.PathLike) -> pl.DataFrame:
    return pl.read_csv(path, schema_overrides={"repetition": pl.Utf8})
