"""
CPU and resident-memory sampling of running processes.

cpu_percent is process CPU time (user + system) gained between two samples
divided by the wall time between them, so a process saturating one core
reads ~100 and the ceiling is 100 x cores.
"""

import logging
import threading
import time
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np
import psutil

from notebook_gate.errors import ProcessVanished

logger = logging.getLogger(__name__)

MIN_INTERVAL = 0.01
DEFAULT_INTERVAL = 0.1


@dataclass(frozen=True)
class ResourceSample:
    t: float
    cpu_percent: float
    rss_bytes: int
    label: str = ""


def _cpu_seconds(proc: psutil.Process) -> float:
    times = proc.cpu_times()
    return times.user + times.system


def sample_resources(
    pid: int,
    interval: float = DEFAULT_INTERVAL,
    stop_signal: threading.Event | None = None,
    label: str = "",
) -> list[ResourceSample]:
    """Sample `pid` every `interval` seconds until `stop_signal` is set.

    If the process exits mid-run the samples taken so far are returned.
    """
    if interval < MIN_INTERVAL:
        raise ValueError(f"interval must be at least {MIN_INTERVAL * 1000:.0f} ms")
    stop_signal = stop_signal or threading.Event()

    try:
        proc = psutil.Process(pid)
        prev_cpu = _cpu_seconds(proc)
    except psutil.NoSuchProcess as e:
        raise ProcessVanished(pid) from e
    prev_t = time.monotonic()

    samples: list[ResourceSample] = []
    while not stop_signal.wait(interval):
        try:
            with proc.oneshot():
                cpu = _cpu_seconds(proc)
                rss = proc.memory_info().rss
        except (psutil.NoSuchProcess, psutil.ZombieProcess):
            logger.warning(f"[SAMPLER] pid {pid} exited after {len(samples)} samples")
            break
        now = time.monotonic()
        elapsed = now - prev_t
        cpu_percent = max(0.0, (cpu - prev_cpu) / elapsed * 100) if elapsed > 0 else 0.0
        samples.append(ResourceSample(now, cpu_percent, rss, label))
        prev_t, prev_cpu = now, cpu

    return samples


def mean_cpu(samples: list[ResourceSample]) -> float:
    return float(np.mean([s.cpu_percent for s in samples])) if samples else 0.0


def peak_rss(samples: list[ResourceSample]) -> int:
    return max((s.rss_bytes for s in samples), default=0)


class ResourceSampler:
    """Samples several labelled processes on background threads.

    Usage:
        with ResourceSampler({"gateway": gw_pid, "upstream": up_pid}) as sampler:
            ...  # run the load
        sampler.samples["gateway"]
    """

    def __init__(self, targets: Mapping[str, int], interval: float = DEFAULT_INTERVAL):
        if not targets:
            raise ValueError("at least one process to sample is required")
        if interval < MIN_INTERVAL:
            raise ValueError(f"interval must be at least {MIN_INTERVAL * 1000:.0f} ms")
        self.targets = dict(targets)
        self.interval = interval
        self.samples: dict[str, list[ResourceSample]] = {label: [] for label in self.targets}
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    def _run(self, label: str, pid: int) -> None:
        try:
            self.samples[label] = sample_resources(pid, self.interval, self._stop, label)
        except ProcessVanished:
            logger.warning(f"[SAMPLER] {label} (pid {pid}) was gone before sampling started")

    def start(self) -> "ResourceSampler":
        for label, pid in self.targets.items():
            thread = threading.Thread(target=self._run, args=(label, pid), name=f"sampler-{label}", daemon=True)
            thread.start()
            self._threads.append(thread)
        logger.debug(f"[SAMPLER] Sampling {self.targets} every {self.interval * 1000:.0f}ms")
        return self

    def stop(self) -> dict[str, list[ResourceSample]]:
        self._stop.set()
        for thread in self._threads:
            thread.join()
        return self.samples

    def __enter__(self) -> "ResourceSampler":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def window(self, start: float, end: float) -> dict[str, list[ResourceSample]]:
        """Samples per label whose timestamp falls in [start, end] (monotonic clock)."""
        return {label: [s for s in samples if start <= s.t <= end] for label, samples in self.samples.items()}
