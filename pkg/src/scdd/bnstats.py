"""Diagnostics for how informative a model's BatchNorm statistics are.

The guiding quantity is the spread of the stored running statistics across
channels: a layer whose per-channel means (and variances) fluctuate strongly
carries a richer target signal for statistic-matching image synthesis than a
layer whose statistics have flattened out. Spread is measured two ways:

* ``channel_variance``: population variance across the channels of one
  statistic vector;
* ``gaussian_entropy``: the differential entropy ``H = 1/2 ln(2*pi*e*s2)``
  of a Gaussian with variance ``s2``, applied to the pooled per-channel
  variance of a layer. ``empirical_differential_entropy`` provides the
  histogram plug-in estimate used to sanity-check the closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, PrecisionError, ShapeError
from .netcore import BNStatSnapshot


def channel_variance(values) -> float:
    """Population variance (divide by N) across the entries of a vector."""
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise DomainError("channel_variance of an empty vector is undefined")
    return float(arr.var())


def gaussian_entropy(variance: float) -> float:
    """Differential entropy in nats of a Gaussian with the given variance.

    ``H = 1/2 ln(2*pi*e*variance)``; exact, so ``H(c*s2) - H(s2) = ln(c)/2``.
    """
    if variance <= 0:
        raise DomainError(f"variance must be positive, got {variance}")
    return 0.5 * math.log(2.0 * math.pi * math.e * variance)


def empirical_differential_entropy(samples, bins: int = 64) -> float:
    """Histogram plug-in estimate of differential entropy in nats.

    Partitions the sample range into equal-width bins and returns
    ``-sum(p * ln p) + ln(width)`` over occupied bins. Needs enough samples
    for the histogram to be meaningful.
    """
    arr = np.asarray(samples, dtype=np.float64).ravel()
    if arr.size < 1000:
        raise PrecisionError(f"need at least 1000 samples, got {arr.size}")
    if bins < 2:
        raise DomainError("need at least 2 bins")
    counts, edges = np.histogram(arr, bins=bins)
    width = edges[1] - edges[0]
    if width <= 0:
        raise DomainError("degenerate sample range (all values equal)")
    p = counts[counts > 0] / arr.size
    return float(-(p * np.log(p)).sum() + math.log(width))


@dataclass(frozen=True)
class LayerInformativeness:
    layer_index: int
    channels: int
    var_of_means: float
    var_of_vars: float
    entropy_nats: float  # Gaussian entropy of the pooled per-channel variance


@dataclass(frozen=True)
class InformativenessReport:
    model_id: str
    per_layer: tuple[LayerInformativeness, ...]

    @property
    def headline(self) -> dict:
        return {"first_layer_var_of_means": self.per_layer[0].var_of_means}

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "headline": self.headline,
            "per_layer": [vars(l) for l in self.per_layer],
        }


def informativeness_report(snapshot: BNStatSnapshot, model_id: str = "") -> InformativenessReport:
    """Per-layer spread statistics of a BN snapshot.

    Entropy is computed from the pooled (channel-averaged) running variance;
    a layer whose pooled variance is zero gets ``-inf``.
    """
    layers = []
    for layer in snapshot.layers:
        pooled = float(np.mean(layer.variance))
        entropy = gaussian_entropy(pooled) if pooled > 0 else float("-inf")
        layers.append(
            LayerInformativeness(
                layer_index=layer.layer_index,
                channels=int(layer.mean.size),
                var_of_means=channel_variance(layer.mean),
                var_of_vars=channel_variance(layer.variance),
                entropy_nats=entropy,
            )
        )
    return InformativenessReport(model_id, tuple(layers))


@dataclass(frozen=True)
class LayerDelta:
    layer_index: int
    var_of_means_delta: float
    var_of_vars_delta: float
    entropy_delta: float
    a_more_informative: bool | None  # None on an exact tie


@dataclass(frozen=True)
class InformativenessComparison:
    model_a: str
    model_b: str
    per_layer: tuple[LayerDelta, ...]
    verdict: str  # "a" | "b" | "tie"

    def to_dict(self) -> dict:
        return {
            "model_a": self.model_a,
            "model_b": self.model_b,
            "verdict": self.verdict,
            "per_layer": [vars(l) for l in self.per_layer],
        }


def compare_informativeness(
    a: BNStatSnapshot, b: BNStatSnapshot, name_a: str = "a", name_b: str = "b"
) -> InformativenessComparison:
    """Layer-wise deltas (a minus b) of the spread statistics, plus a verdict.

    Per layer the winner is decided by the sign of the var-of-means delta;
    the overall verdict is the majority across layers. Swapping the arguments
    negates every delta.
    """
    if not a.compatible_with(b):
        raise ShapeError("snapshots have different layer counts or channel widths")
    ra = informativeness_report(a, name_a)
    rb = informativeness_report(b, name_b)
    deltas = []
    score = 0
    for la, lb in zip(ra.per_layer, rb.per_layer):
        d_means = la.var_of_means - lb.var_of_means
        winner = None if d_means == 0 else d_means > 0
        score += 0 if winner is None else (1 if winner else -1)
        deltas.append(
            LayerDelta(
                layer_index=la.layer_index,
                var_of_means_delta=d_means,
                var_of_vars_delta=la.var_of_vars - lb.var_of_vars,
                entropy_delta=la.entropy_nats - lb.entropy_nats,
                a_more_informative=winner,
            )
        )
    verdict = "tie" if score == 0 else ("a" if score > 0 else "b")
    return InformativenessComparison(name_a, name_b, tuple(deltas), verdict)
