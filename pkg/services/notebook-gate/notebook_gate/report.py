"""
Side-by-side comparison of two benchmarked stacks.

Per connection level, B is compared against A: latency ratio (p50, with p99
alongside), throughput ratio, mean CPU delta and peak RSS delta. Memory is
also summarized as the "Stack | Size(MB)" table, and per process as
"Object | Size(MB)" when resource samples were recorded.
"""

import logging
import os
from dataclasses import dataclass
from pathlib import Path

import polars as pl

from notebook_gate.bench import MEDIAN_ROW, RESULT_COLUMNS, read_results_csv, write_csv_atomic
from notebook_gate.errors import MismatchedSweep, SchemaViolation

logger = logging.getLogger(__name__)

MB = 1024 * 1024


@dataclass(frozen=True)
class StackRun:
    """One side of a comparison: a labelled results frame plus optional resource samples."""

    label: str
    results: pl.DataFrame
    samples: pl.DataFrame | None = None

    @classmethod
    def from_csv(cls, label: str, results_path: str | os.PathLike, samples_path: str | os.PathLike | None = None) -> "StackRun":
        samples = pl.read_csv(samples_path) if samples_path else None
        return cls(label, read_results_csv(results_path), samples)

    def medians(self) -> pl.DataFrame:
        missing = [c for c in RESULT_COLUMNS if c not in self.results.columns]
        if missing:
            raise SchemaViolation(missing[0], f"results for '{self.label}' lack column {missing[0]}")
        rows = self.results.filter(pl.col("repetition") == MEDIAN_ROW)
        if rows.is_empty():
            rows = self.results.drop("repetition").group_by("connections").median()
        return rows.select(RESULT_COLUMNS[:1] + RESULT_COLUMNS[2:]).sort("connections")


def _ratio(b: str, a: str) -> pl.Expr:
    """b / a with 0/0 = 1 and x/0 = inf."""
    num, den = pl.col(f"{b}_b"), pl.col(f"{a}_a")
    return (
        pl.when((num == 0) & (den == 0)).then(pl.lit(1.0))
        .when(den == 0).then(pl.lit(float("inf")))
        .otherwise(num / den)
    )


@dataclass
class ComparisonReport:
    label_a: str
    label_b: str
    levels: pl.DataFrame
    stack_table: pl.DataFrame
    component_table: pl.DataFrame | None = None
    cpu_series: pl.DataFrame | None = None

    def to_csv(self, path: str | os.PathLike) -> Path:
        return write_csv_atomic(self.levels, path)

    def render(self) -> str:
        with pl.Config(
            tbl_formatting="ASCII_MARKDOWN",
            tbl_hide_column_data_types=True,
            tbl_hide_dataframe_shape=True,
            tbl_rows=-1,
            tbl_cols=-1,
            float_precision=2,
        ):
            parts = [
                f"## {self.label_b} vs {self.label_a}",
                "",
                str(self.levels),
                "",
                "## Memory residency",
                "",
                str(self.stack_table),
            ]
            if self.component_table is not None and not self.component_table.is_empty():
                parts += ["", str(self.component_table)]
        return "\n".join(parts) + "\n"


def _component_table(run: StackRun) -> pl.DataFrame | None:
    if run.samples is None or run.samples.is_empty():
        return None
    return (
        run.samples.group_by("label")
        .agg(pl.col("rss_bytes").max())
        .sort("label")
        .select(
            pl.format("{} ({})", pl.col("label"), pl.lit(run.label)).alias("Object"),
            (pl.col("rss_bytes") / MB).round(1).alias("Size(MB)"),
        )
    )


def _cpu_series(run: StackRun) -> pl.DataFrame | None:
    if run.samples is None or run.samples.is_empty():
        return None
    return run.samples.select(
        pl.lit(run.label).alias("stack"),
        pl.col("label").alias("object"),
        (pl.col("t") - pl.col("t").min()).alias("t_s"),
        pl.col("cpu_percent"),
    )


def compare_report(a: StackRun, b: StackRun) -> ComparisonReport:
    """Compare B against A level by level. Both must cover the same connection levels."""
    med_a, med_b = a.medians(), b.medians()
    levels_a = med_a["connections"].to_list()
    levels_b = med_b["connections"].to_list()
    if levels_a != levels_b:
        raise MismatchedSweep(levels_a, levels_b)

    joined = med_a.join(med_b, on="connections", suffix="_b").rename(
        {c: f"{c}_a" for c in med_a.columns if c != "connections"}
    )
    levels = joined.select(
        "connections",
        _ratio("p50_ms", "p50_ms").alias("latency_ratio"),
        _ratio("p99_ms", "p99_ms").alias("p99_ratio"),
        _ratio("throughput_rps", "throughput_rps").alias("throughput_ratio"),
        (pl.col("mean_cpu_pct_b") - pl.col("mean_cpu_pct_a")).alias("cpu_delta_pct"),
        (pl.col("peak_rss_bytes_b") - pl.col("peak_rss_bytes_a")).alias("rss_delta_bytes"),
    )

    stack_table = pl.DataFrame({
        "Stack": [a.label, b.label],
        "Size(MB)": [
            round((med_a["peak_rss_bytes"].max() or 0) / MB, 1),
            round((med_b["peak_rss_bytes"].max() or 0) / MB, 1),
        ],
    })

    components = [t for t in (_component_table(a), _component_table(b)) if t is not None]
    series = [s for s in (_cpu_series(a), _cpu_series(b)) if s is not None]
    logger.debug(f"[BENCH] Compared {b.label} against {a.label} over levels {levels_a}")
    return ComparisonReport(
        label_a=a.label,
        label_b=b.label,
        levels=levels,
        stack_table=stack_table,
        component_table=pl.concat(components) if components else None,
        cpu_series=pl.concat(series) if series else None,
    )
