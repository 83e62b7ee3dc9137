"""Outlier measurements: excess kurtosis, 6-sigma scans, attention sinks, histograms."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .model import ActivationTap, ModelConfig, Params, forward
from .numerics import NumericsError, excess_kurtosis

SIGMA_THRESHOLD = 6.0
SINK_EPS = 0.3
SINK_HEAD_SCORE = 0.5
STOCHASTIC_TOL = 1e-4


class DiagnosticsError(ValueError):
    pass


@dataclass
class KurtosisSummary:
    per_site: dict[tuple[int, str], float]
    mean: float
    max: float


@dataclass
class MassiveActivation:
    layer: int
    site: str
    token_position: int
    channel: int
    value: float
    sigma_distance: float


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    scale: str = "linear"


@dataclass
class DiagnosticsReport:
    kurtosis: dict[tuple[int, str], float]
    aggregate_mean_kurtosis: float
    aggregate_max_kurtosis: float
    massive_activations: list[MassiveActivation] = field(default_factory=list)
    sink_scores: dict[tuple[int, int], float] = field(default_factory=dict)
    histograms: dict[tuple[int, str], Histogram] = field(default_factory=dict)
    sink_eps: float = SINK_EPS

    def sink_heads(self) -> list[tuple[int, int]]:
        return [k for k, s in self.sink_scores.items() if s > SINK_HEAD_SCORE]

    def to_dict(self) -> dict:
        return {
            "kurtosis": [
                {"layer": l, "site": s, "excess_kurtosis": _json_float(v)}
                for (l, s), v in sorted(self.kurtosis.items())
            ],
            "aggregate_mean_kurtosis": _json_float(self.aggregate_mean_kurtosis),
            "aggregate_max_kurtosis": _json_float(self.aggregate_max_kurtosis),
            "massive_activations": [asdict(m) for m in self.massive_activations],
            "sink_eps": self.sink_eps,
            "sink_scores": [
                {"layer": l, "head": h, "score": v, "sink_head": v > SINK_HEAD_SCORE}
                for (l, h), v in sorted(self.sink_scores.items())
            ],
            "histograms": [
                {"layer": l, "site": s, "scale": hist.scale,
                 "edges": hist.edges.tolist(), "counts": hist.counts.tolist()}
                for (l, s), hist in sorted(self.histograms.items())
            ],
        }


def _json_float(v: float):
    return None if math.isnan(v) else v


def activation_kurtosis(taps: Iterable[ActivationTap]) -> KurtosisSummary:
    """Excess kurtosis of every tap, flattened over tokens and channels.

    Constant taps get NaN and are left out of the aggregates.
    """
    per_site: dict[tuple[int, str], float] = {}
    for tap in taps:
        try:
            per_site[(tap.layer, tap.site)] = excess_kurtosis(tap.values)
        except NumericsError as exc:
            if tap.values.size < 4:
                raise DiagnosticsError(str(exc)) from exc
            per_site[(tap.layer, tap.site)] = float("nan")
    defined = [v for v in per_site.values() if not math.isnan(v)]
    if defined:
        mean = float(np.mean(defined))
        top = float(np.max(defined))
    else:
        mean = top = float("nan")
    return KurtosisSummary(per_site, mean, top)


def massive_activation_scan(taps: Iterable[ActivationTap], threshold: float = SIGMA_THRESHOLD,
                            seq_len: Optional[int] = None) -> list[MassiveActivation]:
    """Entries more than ``threshold`` standard deviations from the tap mean.

    With ``seq_len`` the reported position is within-sequence, otherwise it
    is the row index of the flattened tap.
    """
    records = []
    for tap in taps:
        x = np.asarray(tap.values, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        mu = x.mean()
        sigma = x.std()
        if not sigma > 0:
            continue
        dist = np.abs(x - mu) / sigma
        for row, col in zip(*np.nonzero(dist > threshold)):
            pos = int(row % seq_len) if seq_len else int(row)
            records.append(MassiveActivation(tap.layer, tap.site, pos, int(col),
                                             float(x[row, col]), float(dist[row, col])))
    return records


def attention_sink_score(attention: np.ndarray, eps: float = SINK_EPS) -> np.ndarray:
    """Fraction of queries putting more than ``eps`` of their mass on key 0.

    ``attention`` is ``[..., heads, queries, keys]`` (or a single
    ``[queries, keys]`` map); leading axes are pooled, one score per head.
    """
    a = np.asarray(attention, dtype=np.float64)
    if a.ndim < 2:
        raise DiagnosticsError("attention map must be at least 2-D")
    if np.any(a < 0) or np.max(np.abs(a.sum(axis=-1) - 1.0)) > STOCHASTIC_TOL:
        raise DiagnosticsError("attention rows are not stochastic")
    hits = a[..., 0] > eps
    if a.ndim == 2:
        return np.asarray(hits.mean())
    pooled = np.moveaxis(hits, -2, -1).reshape(-1, a.shape[-3]) if a.ndim > 3 else hits.T
    return pooled.mean(axis=0)


def sink_scores(attention_maps: Sequence[np.ndarray], eps: float = SINK_EPS) -> dict[tuple[int, int], float]:
    out = {}
    for layer, maps in enumerate(attention_maps):
        for head, score in enumerate(np.atleast_1d(attention_sink_score(maps, eps))):
            out[(layer, head)] = float(score)
    return out


def histogram(values: np.ndarray, buckets: int = 64, scale: str = "linear",
              edges: Optional[Sequence[float]] = None) -> Histogram:
    """Bucket counts that always sum to the number of values.

    Explicit ``edges`` take precedence; values outside them are clamped
    into the end buckets.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    if edges is not None:
        e = np.asarray(edges, dtype=np.float64)
        if e.size < 3 or np.any(np.diff(e) <= 0):
            raise DiagnosticsError("edges must be strictly increasing with at least 2 buckets")
        counts, _ = np.histogram(np.clip(x, e[0], e[-1]), bins=e)
        return Histogram(e, counts, "explicit")
    if buckets < 2:
        raise DiagnosticsError("need at least 2 buckets")
    if scale == "linear":
        t = x
    elif scale == "symlog":
        t = np.sign(x) * np.log1p(np.abs(x))
    else:
        raise DiagnosticsError(f"unknown histogram scale {scale!r}")
    lo, hi = (float(t.min()), float(t.max())) if t.size else (0.0, 1.0)
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    t_edges = np.linspace(lo, hi, buckets + 1)
    counts, _ = np.histogram(t, bins=t_edges)
    if scale == "symlog":
        e = np.sign(t_edges) * np.expm1(np.abs(t_edges))
    else:
        e = t_edges
    return Histogram(e, counts, scale)


def export_histograms(taps: Iterable[ActivationTap], buckets: int = 64, scale: str = "linear",
                      edges: Optional[Sequence[float]] = None) -> dict[tuple[int, str], Histogram]:
    return {(t.layer, t.site): histogram(t.values, buckets, scale, edges) for t in taps}


def write_histogram_csv(hist: Histogram, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bucket", "lo", "hi", "count"])
        for i, c in enumerate(hist.counts):
            w.writerow([i, repr(float(hist.edges[i])), repr(float(hist.edges[i + 1])), int(c)])


def run_diagnostics(params: Params, config: ModelConfig, tokens, sink_eps: float = SINK_EPS,
                    buckets: int = 64, scale: str = "linear") -> DiagnosticsReport:
    """Forward ``tokens`` once with taps and attention maps, then measure everything."""
    res = forward(params, config, tokens, taps_requested=True, attention=True)
    kurt = activation_kurtosis(res.taps)
    seq_len = np.atleast_2d(np.asarray(tokens)).shape[1]
    return DiagnosticsReport(
        kurtosis=kurt.per_site,
        aggregate_mean_kurtosis=kurt.mean,
        aggregate_max_kurtosis=kurt.max,
        massive_activations=massive_activation_scan(res.taps, seq_len=seq_len),
        sink_scores=sink_scores(res.attention_maps or [], sink_eps),
        histograms=export_histograms(res.taps, buckets, scale),
        sink_eps=sink_eps,
    )


def write_report(report: DiagnosticsReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
