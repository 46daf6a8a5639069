"""Doubling-ladder timing of the grouped scan against dense softmax attention."""

from __future__ import annotations

import json
import logging
import math
import statistics
import time
from typing import Callable, Sequence

import torch

from m4fuse.mixer import SSMGroup

log = logging.getLogger(__name__)

SCAN_RATIO_RANGE = (1.6, 2.6)
ATTENTION_MIN_RATIO = 3.2
MIN_MEASURE_SECONDS = 5e-2


def dense_attention(x: torch.Tensor) -> torch.Tensor:
    """softmax(Q K^T / sqrt(C)) V with Q = K = V = x, shape (B, L, C)."""
    scores = x @ x.transpose(1, 2) / math.sqrt(x.shape[-1])
    return torch.softmax(scores, dim=-1) @ x


def calls_per_measurement(fn: Callable[[], object], min_seconds: float = MIN_MEASURE_SECONDS) -> int:
    """Smallest power-of-two batch of calls whose total time reaches ``min_seconds``."""
    fn()
    number = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(number):
            fn()
        if time.perf_counter() - t0 >= min_seconds:
            break
        number *= 2
    if number > 1:
        log.warning("timer resolution: batching %d calls per measurement", number)
    return number


def time_ladder(fns: dict[int, Callable[[], object]], reps: int = 5) -> dict[int, float]:
    """Median seconds per call for each length.

    Lengths are measured round-robin within every repetition so slow drift in
    machine load hits all of them alike.
    """
    numbers = {k: calls_per_measurement(fn) for k, fn in fns.items()}
    samples: dict[int, list[float]] = {k: [] for k in fns}
    for _ in range(max(reps, 3)):
        for k, fn in fns.items():
            n = numbers[k]
            t0 = time.perf_counter()
            for _ in range(n):
                fn()
            samples[k].append((time.perf_counter() - t0) / n)
    return {k: statistics.median(v) for k, v in samples.items()}


def _ladder_ratios(times: dict[int, float]) -> dict[int, float]:
    lengths = sorted(times)
    return {a: times[b] / times[a] for a, b in zip(lengths, lengths[1:]) if b == 2 * a}


def bench_complexity(
    width: int = 64,
    groups: int = 4,
    state_dim: int = 16,
    scan_lengths: Sequence[int] = (4096, 8192, 16384, 32768),
    attention_lengths: Sequence[int] = (1024, 2048, 4096),
    reps: int = 9,
    seed: int = 0,
) -> dict:
    """Time the grouped scan and dense attention at the same channel width.

    Runs single-threaded. Ratios are keyed by the shorter length of each
    doubling pair, i.e. ``ratio[L] = t(2L) / t(L)``.
    """
    for lengths in (scan_lengths, attention_lengths):
        ls = list(lengths)
        if ls != sorted(ls) or any(b != 2 * a for a, b in zip(ls, ls[1:])):
            raise ValueError(f"lengths must form a doubling ladder, got {ls}")
    prev_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    gen = torch.Generator().manual_seed(seed)
    width_per_group = width // groups
    scan_groups = [SSMGroup(width_per_group, state_dim, gen) for _ in range(groups)]
    try:
        scan_fns = {}
        for length in scan_lengths:
            x = torch.randn(1, length, width, generator=gen)
            chunks = [c.contiguous() for c in torch.chunk(x, groups, dim=-1)]
            scan_fns[length] = torch.no_grad()(
                lambda chunks=chunks: [g(c) for g, c in zip(scan_groups, chunks)]
            )
        scan_times = time_ladder(scan_fns, reps)

        attn_fns = {}
        for length in attention_lengths:
            x = torch.randn(1, length, width, generator=gen)
            attn_fns[length] = torch.no_grad()(lambda x=x: dense_attention(x))
        attn_times = time_ladder(attn_fns, reps)
    finally:
        torch.set_num_threads(prev_threads)

    scan_ratios = _ladder_ratios(scan_times)
    attn_ratios = _ladder_ratios(attn_times)
    lo, hi = SCAN_RATIO_RANGE
    return {
        "width": width,
        "reps": reps,
        "scan": {"seconds": scan_times, "ratios": scan_ratios,
                 "pass": all(lo <= r <= hi for r in scan_ratios.values())},
        "attention": {"seconds": attn_times, "ratios": attn_ratios,
                      "pass": all(r >= ATTENTION_MIN_RATIO for r in attn_ratios.values())},
    }


def report_lines(report: dict) -> list[str]:
    """Flatten a benchmark report into JSON lines, one per timed point."""
    lines = []
    for path in ("scan", "attention"):
        part = report[path]
        for length, seconds in sorted(part["seconds"].items()):
            lines.append(json.dumps({
                "path": path,
                "length": length,
                "width": report["width"],
                "median_seconds": seconds,
                "ratio_to_double": part["ratios"].get(length),
            }))
        lines.append(json.dumps({"path": path, "summary": True, "pass": part["pass"],
                                 "ratios": {str(k): v for k, v in part["ratios"].items()}}))
    return lines
