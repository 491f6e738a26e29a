# app/services/augment.py
"""Label-preserving transformations applied to target samples for the consistency loss."""
from typing import List, Optional, Sequence

import numpy as np

from app.models import AugmentSpec
from app.services.nn import Mlp


class Augmentation:
    """Result of one augmentation draw: a transformed input, a dropout rate, or neither."""

    def __init__(self, x: np.ndarray, dropout_rate: Optional[float] = None, sigma: Optional[float] = None):
        self.x = x
        self.dropout_rate = dropout_rate
        self.sigma = sigma

    @property
    def uses_dropout(self) -> bool:
        return self.dropout_rate is not None


def augment_batch(x: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> Augmentation:
    """
    Draw one transformation for a target mini-batch.

    gaussian_noise: sigma ~ U[sigma_min, sigma_max] once per batch, fresh noise per element.
    dropout_rate: a single rate p ~ U[p_min, p_max] for the augmented forward pass.
    none: the batch unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    if spec.kind == "gaussian_noise":
        sigma = float(rng.uniform(spec.sigma_min, spec.sigma_max))
        return Augmentation(x + sigma * rng.standard_normal(x.shape), sigma=sigma)
    if spec.kind == "dropout_rate":
        return Augmentation(x, dropout_rate=float(rng.uniform(spec.p_min, spec.p_max)))
    return Augmentation(x)


def site_rates(net: Mlp, rate: float, sites: Optional[Sequence[int]] = None) -> List[float]:
    """Spread one dropout rate over the configured sites of ``net`` (all sites when None)."""
    chosen = range(net.num_sites) if sites is None else sites
    rates = [0.0] * net.num_sites
    for site in chosen:
        if not 0 <= site < net.num_sites:
            raise ValueError(f"dropout site {site} outside [0, {net.num_sites})")
        rates[site] = rate
    return rates
