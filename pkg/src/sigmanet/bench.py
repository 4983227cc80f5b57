"""FLOP verification and wall-clock scaling of one attention head."""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .attention import SsaParams, full_flops, full_self_attention, ssa_flops, ssa_forward
from .autodiff.flops import FlopCounter
from .autodiff.tensor import Tensor, no_grad

MECHANISMS = ("ssa", "full")
HEADER = ("mechanism", "N", "Dp", "Np", "pred_flops", "meas_flops", "time_ns", "bytes")
MIN_RESOLUTION_FACTOR = 100
# batch short calls so one sample is long enough to average out scheduler jitter
MIN_SAMPLE_NS = 20_000_000


@dataclass
class ScalingRow:
    mechanism: str
    N: int
    Dp: int
    Np: int
    pred_flops: int
    meas_flops: int
    time_ns: int
    bytes: int

    def as_tuple(self) -> tuple:
        return (self.mechanism, self.N, self.Dp, self.Np, self.pred_flops, self.meas_flops, self.time_ns, self.bytes)


@dataclass
class ScalingReport:
    rows: list[ScalingRow] = field(default_factory=list)
    slopes: dict[str, float] = field(default_factory=dict)

    def by_mechanism(self, mechanism: str) -> list[ScalingRow]:
        return [r for r in self.rows if r.mechanism == mechanism]

    def summary(self) -> str:
        lines = []
        for mech in sorted({r.mechanism for r in self.rows}):
            rows = self.by_mechanism(mech)
            exact = all(r.pred_flops == r.meas_flops for r in rows)
            slope = self.slopes.get(mech, float("nan"))
            lines.append(f"{mech}: points={len(rows)} slope={slope:.4f} flops_exact={exact}")
        return "\n".join(lines)


def _check_mechanism(mechanism: str) -> str:
    if mechanism not in MECHANISMS:
        raise ValueError(f"unknown mechanism {mechanism!r}; expected one of {MECHANISMS}")
    return mechanism


def _grid(n: int) -> tuple[int, int]:
    # most square factorisation, so SSA always has a valid grid
    h = int(np.sqrt(n))
    while n % h:
        h -= 1
    return h, n // h


def predicted_flops(mechanism: str, n: int, dp: int, np_: int) -> int:
    if _check_mechanism(mechanism) == "ssa":
        return ssa_flops(n, dp, np_)
    return full_flops(n, dp)


def estimate_bytes(mechanism: str, n: int, dp: int, np_: int, itemsize: int = 4) -> int:
    """Summed footprint of the tensors one head materialises."""
    if _check_mechanism(mechanism) == "ssa":
        elems = 3 * n * dp + 2 * n * np_ + 2 * n * np_ * dp + 2 * n * np_ + n * dp
    else:
        elems = 3 * n * dp + 2 * n * n + n * dp
    return int(elems * itemsize)


def _head(mechanism: str, n: int, dp: int, np_: int, seed: int, dtype):
    """Random single-head inputs; returns a closure running one forward pass."""
    rng = np.random.default_rng(seed)
    U = Tensor(rng.standard_normal((n, dp)).astype(dtype))
    ws = [Tensor((rng.standard_normal((dp, dp)) / np.sqrt(dp)).astype(dtype)) for _ in range(3)]
    if mechanism == "ssa":
        params = SsaParams(Tensor((0.1 * rng.standard_normal((dp, 2 * np_))).astype(dtype)),
                           Tensor(rng.uniform(-2, 2, 2 * np_).astype(dtype)))
        grid = _grid(n)
        return lambda: ssa_forward(U, *ws, params, grid)
    return lambda: full_self_attention(U, *ws)


def verify_flops(mechanism: str, n: int, dp: int, np_: int = 8, seed: int = 0):
    """One instrumented forward pass against the closed form.

    Returns ``(predicted, measured, equal)``.
    """
    predicted = predicted_flops(mechanism, n, dp, np_)
    run = _head(mechanism, n, dp, np_, seed, np.float64)
    with no_grad(), FlopCounter() as fc:
        run()
    return predicted, fc.total, predicted == fc.total


def _clock_resolution_ns() -> float:
    return time.get_clock_info("perf_counter").resolution * 1e9


def _time_call(fn, repeats: int, number: int) -> float:
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        for _ in range(number):
            fn()
        samples.append((time.perf_counter_ns() - t0) / number)
    return statistics.median(samples)


def loglog_slope(ns, times) -> float:
    slope, _ = np.polyfit(np.log(np.asarray(ns, float)), np.log(np.asarray(times, float)), 1)
    return float(slope)


def measure_scaling(mechanism: str, n_list, dp: int = 64, np_: int = 8, repeats: int = 5,
                    seed: int = 0, dtype=np.float64) -> ScalingReport:
    """Median forward time per ``N`` (after one warm-up) and the log-log slope.

    Calls too short for the clock are batched until each sample spans at least
    100 ticks (and at least ``MIN_SAMPLE_NS``).
    """
    _check_mechanism(mechanism)
    n_list = [int(n) for n in n_list]
    if len(n_list) < 4 or any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError(f"need at least 4 strictly increasing sizes, got {n_list}")
    if repeats < 5:
        raise ValueError(f"repeats must be >= 5, got {repeats}")
    floor_ns = max(MIN_RESOLUTION_FACTOR * _clock_resolution_ns(), MIN_SAMPLE_NS)
    report = ScalingReport()
    with threadpool_limits(limits=1), no_grad():
        for n in n_list:
            pred, meas, _ = verify_flops(mechanism, n, dp, np_, seed)
            run = _head(mechanism, n, dp, np_, seed, dtype)
            run()
            number = 1
            while True:
                t = _time_call(run, 1, number)
                if t * number >= floor_ns:
                    break
                number = max(number + 1, int(np.ceil(number * floor_ns / max(t * number, 1.0))))
            t = _time_call(run, repeats, number)
            report.rows.append(ScalingRow(mechanism, n, dp, np_, pred, meas, max(1, int(round(t))),
                                          estimate_bytes(mechanism, n, dp, np_, np.dtype(dtype).itemsize)))
    rows = report.by_mechanism(mechanism)
    report.slopes[mechanism] = loglog_slope([r.N for r in rows], [r.time_ns for r in rows])
    return report


def merge(*reports: ScalingReport) -> ScalingReport:
    out = ScalingReport()
    for r in reports:
        out.rows.extend(r.rows)
        out.slopes.update(r.slopes)
    return out


def report_csv(report: ScalingReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HEADER)
    for row in report.rows:
        writer.writerow(row.as_tuple())
    return buf.getvalue()


def emit_report(report: ScalingReport, path, summary_path=None, extra=()) -> None:
    """Write the CSV and, next to it, a ``.summary.txt`` block (plus ``extra`` lines)."""
    path = str(path)
    with open(path, "w", newline="") as fh:
        fh.write(report_csv(report))
    summary_path = summary_path or (path.rsplit(".", 1)[0] + ".summary.txt")
    with open(summary_path, "w") as fh:
        fh.write("\n".join([report.summary(), *extra]).strip() + "\n")


def read_report(path) -> ScalingReport:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != HEADER:
            raise ValueError(f"unexpected header {header}")
        rows = [ScalingRow(r[0], *map(int, r[1:])) for r in reader]
    return ScalingReport(rows)


def crossover(dp: int, np_: int, n_max: int = 1 << 20) -> int:
    """Smallest ``N`` from which SSA needs fewer multiply-accumulates than full attention."""
    for n in range(1, n_max):
        if ssa_flops(n, dp, np_) < full_flops(n, dp):
            return n
    raise ValueError("no crossover below n_max")
