# app/services/divergence.py
"""
Diagnostics for the target-risk bound: the complexity terms B_alpha and V,
an H-divergence proxy from a domain-classifier probe, the oracle-only
estimate of the combined risk lambda_alpha, and Jensen-Shannon distances
between label distributions.
"""
import logging
import math
from typing import Dict, List, Optional, Sequence

import numpy as np

from app.errors import DataError, DomainError, NonFiniteError, OracleAccessError, ShapeError
from app.models import BoundReport, ProbeSection
from app.services import autodiff as ad
from app.services.data_service import DomainDataset
from app.services.nn import Mlp, OptimizerState, build_mlp, mlp_forward, optimizer_step

logger = logging.getLogger(__name__)

SIMPLEX_TOLERANCE = 1e-9


def _check_simplex(weights: Sequence[float], name: str) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 1 or weights.size == 0:
        raise ShapeError(f"{name} must be a non-empty vector")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > SIMPLEX_TOLERANCE:
        raise DomainError(f"{name} is not on the simplex: {weights.tolist()}")
    return weights


def _check_sample_terms(n: int, delta: float) -> None:
    if n <= 0:
        raise DomainError(f"sample count must be positive, got {n}")
    if not 0.0 < delta < 1.0:
        raise DomainError(f"delta must lie in (0, 1), got {delta}")


def compute_B(alpha: Sequence[float], M: int, d: int, n: int, delta: float) -> float:
    """B_alpha(delta) = 2 sqrt(M (2d ln(2(n+1)) + ln(8/delta)) / n * sum_j alpha_j^2)."""
    alpha = _check_simplex(alpha, "alpha")
    _check_sample_terms(n, delta)
    if alpha.size != M:
        raise ShapeError(f"alpha has {alpha.size} components but M = {M}")
    complexity = M * (2 * d * math.log(2 * (n + 1)) + math.log(8.0 / delta)) / n
    return 2.0 * math.sqrt(complexity * float(np.sum(alpha * alpha)))


def compute_V(d: int, n: int, delta: float) -> float:
    """V(delta) = 2 sqrt((2d ln(2n) + ln(4/delta)) / n)."""
    _check_sample_terms(n, delta)
    return 2.0 * math.sqrt((2 * d * math.log(2 * n) + math.log(4.0 / delta)) / n)


# --- probe classifiers --------------------------------------------------------

class Probe:
    """Small MLP classifier with input standardisation, trained on weighted cross-entropy."""

    def __init__(self, net: Mlp, shift: np.ndarray, scale: np.ndarray):
        self.net = net
        self.shift = shift
        self.scale = scale

    def predict(self, x: np.ndarray) -> np.ndarray:
        logits = mlp_forward(self.net, (np.asarray(x) - self.shift) / self.scale)
        return np.argmax(logits.value, axis=1)


def train_probe(x: np.ndarray, y: np.ndarray, num_classes: int, config: ProbeSection, rng: np.random.Generator,
                sample_weights: Optional[np.ndarray] = None) -> Probe:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    weights = np.ones(len(y)) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    shift = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    z = (x - shift) / scale

    net = build_mlp([x.shape[1]] + list(config.hidden) + [num_classes], rng, "probe")
    optimizer = OptimizerState(config.optimizer, config.learning_rate)
    batch = min(config.batch_size, len(y))
    for _ in range(config.epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y) - batch + 1, batch):
            idx = order[start:start + batch]
            w = weights[idx]
            nll = ad.cross_entropy_terms(mlp_forward(net, z[idx]), y[idx])
            loss = ad.scale(ad.sum(ad.multiply(nll, ad.constant(w))), 1.0 / max(w.sum(), 1e-12))
            if not np.isfinite(loss.item()):
                raise NonFiniteError("probe", "probe classifier diverged (non-finite loss)")
            ad.backward(loss)
            optimizer_step(optimizer, net.parameters())
    return Probe(net, shift, scale)


def estimate_h_divergence(samples_a: np.ndarray, samples_b: np.ndarray, probe_config: ProbeSection,
                          seed: int) -> float:
    """
    Proxy H-divergence 2(1 - 2 err) clamped to [0, 2], where err is the
    balanced test error of a probe trained to tell ``samples_a`` from ``samples_b``.
    """
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise DataError("H-divergence estimation needs non-empty sample sets")
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"sample sets differ in dimension: {a.shape} vs {b.shape}")
    rng = np.random.default_rng(seed)
    n = min(len(a), len(b))
    if len(a) > n:
        a = a[np.sort(rng.choice(len(a), n, replace=False))]
    if len(b) > n:
        b = b[np.sort(rng.choice(len(b), n, replace=False))]

    order = rng.permutation(n)
    n_train = min(max(int(round(probe_config.train_fraction * n)), 1), n - 1) if n > 1 else n
    train, test = order[:n_train], order[n_train:]
    if len(test) == 0:
        raise DataError("H-divergence estimation needs at least two samples per set")

    x = np.concatenate([a[train], b[train]])
    y = np.concatenate([np.zeros(len(train), dtype=np.int64), np.ones(len(train), dtype=np.int64)])
    probe = train_probe(x, y, 2, probe_config, rng)
    err_a = float(np.mean(probe.predict(a[test]) != 0))
    err_b = float(np.mean(probe.predict(b[test]) != 1))
    error = 0.5 * (err_a + err_b)
    estimate = float(np.clip(2.0 * (1.0 - 2.0 * error), 0.0, 2.0))
    logger.info(f"H-divergence proxy: balanced test error {error:.4f} -> {estimate:.4f} (n={n})")
    return estimate


def estimate_lambda(sources: Sequence[DomainDataset], target: DomainDataset, alpha: Sequence[float],
                    probe_config: ProbeSection, seed: int) -> float:
    """
    Oracle-only estimate of min_h sum_j alpha_j err_Sj(h) + err_T(h).

    Trains one probe on the alpha-weighted sources plus the target with its
    sealed labels and reports the achieved weighted 0-1 risks.
    """
    alpha = _check_simplex(alpha, "alpha")
    if alpha.size != len(sources):
        raise ShapeError(f"alpha has {alpha.size} components for {len(sources)} sources")
    if not target.has_oracle and target.labels is None:
        raise OracleAccessError("lambda estimation is oracle-only: the target has no oracle labels")
    target_labels = target.oracle_labels()
    for source in sources:
        if source.labels is None:
            raise DataError(f"{source.domain_id}: lambda estimation needs labeled sources")

    num_classes = max(int(max(s.labels.max() for s in sources)), int(target_labels.max())) + 1
    x = np.concatenate([s.features for s in sources] + [target.features])
    y = np.concatenate([s.labels for s in sources] + [target_labels])
    weights = np.concatenate([np.full(s.n, a / s.n) for s, a in zip(sources, alpha)]
                             + [np.full(target.n, 1.0 / target.n)])
    probe = train_probe(x, y, num_classes, probe_config, np.random.default_rng(seed), weights)

    source_risk = sum(a * float(np.mean(probe.predict(s.features) != s.labels)) for s, a in zip(sources, alpha))
    target_risk = float(np.mean(probe.predict(target.features) != target_labels))
    logger.info(f"lambda estimate: weighted source risk {source_risk:.4f} + target risk {target_risk:.4f}")
    return float(source_risk + target_risk)


# --- label distributions ------------------------------------------------------

def _kl_to_mixture(p: np.ndarray, m: np.ndarray) -> float:
    support = p > 0
    return float(np.sum(p[support] * np.log(p[support] / m[support])))


def js_distance(p: Sequence[float], q: Sequence[float]) -> float:
    """Square root of the Jensen-Shannon divergence (natural log); bounded by sqrt(ln 2)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"label histograms differ in length: {p.shape} vs {q.shape}")
    p = _check_simplex(p, "p")
    q = _check_simplex(q, "q")
    m = 0.5 * (p + q)
    divergence = 0.5 * _kl_to_mixture(p, m) + 0.5 * _kl_to_mixture(q, m)
    return math.sqrt(max(divergence, 0.0))


def label_distribution(dataset: DomainDataset, use_oracle: bool = False) -> np.ndarray:
    labels = dataset.oracle_labels() if use_oracle else dataset.labels
    if labels is None:
        raise DataError(f"{dataset.domain_id}: label distribution needs a labeled dataset")
    classes = max(dataset.num_classes or 0, int(labels.max()) + 1 if labels.size else 0)
    return np.bincount(labels, minlength=classes) / float(len(labels))


def js_matrix(datasets: Sequence[DomainDataset], use_oracle: bool = False) -> List[List[float]]:
    """Pairwise JS distances between the label distributions of all datasets."""
    histograms = [label_distribution(d, use_oracle=use_oracle) for d in datasets]
    classes = max(len(h) for h in histograms)
    histograms = [np.pad(h, (0, classes - len(h))) for h in histograms]
    return [[js_distance(p, q) for q in histograms] for p in histograms]


def weighted_source_risk(predict, sources: Sequence[DomainDataset], alpha: Sequence[float]) -> float:
    """Alpha-weighted empirical 0-1 risk of a predictor on labeled sources."""
    alpha = _check_simplex(alpha, "alpha")
    return float(sum(a * np.mean(predict(s.features) != s.labels) for s, a in zip(sources, alpha)))


def build_bound_report(alpha: Sequence[float], d: int, n: int, delta: float, h_divergence: float,
                       source_risk: float, lambda_hat: Optional[float] = None,
                       target_error: Optional[float] = None,
                       label_js: Optional[List[List[float]]] = None,
                       provenance: Optional[Dict[str, object]] = None) -> BoundReport:
    """Assemble the bound: source risk + h/2 + lambda + B_alpha + V (lambda counts as 0 when not estimated)."""
    alpha = _check_simplex(alpha, "alpha")
    M = alpha.size
    b_alpha = compute_B(alpha, M, d, n, delta)
    v = compute_V(d, n, delta)
    total = source_risk + 0.5 * h_divergence + (lambda_hat or 0.0) + b_alpha + v
    return BoundReport(
        alpha=[float(a) for a in alpha],
        M=M,
        d=d,
        n=n,
        delta=delta,
        B_alpha=b_alpha,
        V=v,
        h_divergence_estimate=h_divergence,
        lambda_hat=lambda_hat,
        weighted_source_risk=source_risk,
        bound_total=total,
        target_error=target_error,
        label_js_distances=label_js,
        provenance=provenance or {},
    )
