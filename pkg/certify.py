"""
Certification Monte Carlo du vote lissé g(x) : label majoritaire de l'ensemble en x + ε.

Le rayon certifié L² vaut R = σ·Φ⁻¹(p̲_A) où p̲_A est la borne inférieure
unilatérale de Clopper-Pearson sur la fréquence du label majoritaire.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import beta, norm

from ensemble_defense import QueryPolicy, noisy_queries, rank_pvalue, top2, vote_counts
from errors import DomainError, ParameterError, ShapeError
from runtime import derive_seed, stream

CERTIFIED = "certified"
ABSTAIN_LOW_PA = "abstain_low_pA"
ABSTAIN_RANK = "abstain_rank"

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CertifyConfig:
    sigma: float = 0.25
    n: int = 1000
    alpha: float = 0.001
    seed: int = 0
    rv_alpha: float = None
    batch_size: int = 500

    def __post_init__(self):
        if not self.sigma > 0:
            raise ParameterError(f"sigma doit être > 0 (reçu {self.sigma})")
        if self.n < 1 or self.batch_size < 1:
            raise ParameterError("n >= 1 et batch_size >= 1 requis")
        if not 0 < self.alpha < 1:
            raise ParameterError(f"alpha hors de (0,1) : {self.alpha}")
        if self.rv_alpha is not None and not 0 < self.rv_alpha < 1:
            raise ParameterError(f"rv_alpha hors de (0,1) : {self.rv_alpha}")


@dataclass(frozen=True)
class Certificate:
    label: int
    rv_pvalue: float
    p_lower: float
    radius: float
    status: str
    n_A: int = 0
    n: int = 0
    sigma: float = 0.0
    alpha: float = 0.0
    seed: int = 0
    rv_alpha: float = None
    batch_size: int = 0
    selection_counts: list = field(default_factory=list)

    @property
    def certified(self):
        return self.status == CERTIFIED

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        return cls(**doc)


def inv_norm_cdf(p):
    p = float(p)
    if not 0.0 < p < 1.0:
        raise DomainError(f"Φ⁻¹ n'est défini que sur (0,1) (reçu {p})")
    return float(norm.ppf(p))


def clopper_pearson_lower(successes, n, alpha):
    """Borne inférieure unilatérale de niveau 1−alpha : quantile alpha de Beta(k, n−k+1)."""
    successes, n = int(successes), int(n)
    if n < 1 or not 0 <= successes <= n:
        raise ParameterError(f"comptes invalides : {successes} succès sur {n}")
    if not 0 < alpha < 1:
        raise ParameterError(f"alpha hors de (0,1) : {alpha}")
    if successes == 0:
        return 0.0
    return float(beta.ppf(alpha, successes, n - successes + 1))


def _check_input(ens, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != ens.input_shape:
        raise ShapeError(f"entrée {x.shape} incompatible avec {ens.input_shape}")
    return x


def _sample_labels(ens, x, sigma, seed, count, batch_size):
    """Labels du vote aux points clip(x + ε_i), ε_i tiré du flux [seed, 1, i]."""
    labels = np.empty(count, dtype=np.int64)
    for start in range(0, count, batch_size):
        stop = min(start + batch_size, count)
        noise = np.stack([sigma * stream(seed, 1, i).standard_normal(x.shape) for i in range(start, stop)])
        labels[start:stop] = np.argmax(vote_counts(ens, np.clip(x + noise, 0.0, 1.0)), axis=1)
    return labels


def certify(ens, x, cfg):
    x = _check_input(ens, x)
    selection = np.clip(x + cfg.sigma * stream(cfg.seed, 0).standard_normal(x.shape), 0.0, 1.0)
    counts = vote_counts(ens, selection[None])[0]
    y_a, n_a_hat, _, n_b_hat = top2(counts)
    pvalue = rank_pvalue(n_a_hat, n_b_hat)

    labels = _sample_labels(ens, x, cfg.sigma, cfg.seed, cfg.n, cfg.batch_size)
    n_a = int(np.sum(labels == y_a))
    p_lower = clopper_pearson_lower(n_a, cfg.n, cfg.alpha)
    if p_lower > 0.5:
        radius = cfg.sigma * inv_norm_cdf(p_lower)
        rank_failed = cfg.rv_alpha is not None and pvalue >= cfg.rv_alpha
        status = ABSTAIN_RANK if rank_failed else CERTIFIED
    else:
        radius, status = 0.0, ABSTAIN_LOW_PA
    logger.debug("certificat %s : y=%d nA=%d/%d p̲A=%.5f R=%.5f", status, y_a, n_a, cfg.n, p_lower, radius)
    return Certificate(
        label=y_a,
        rv_pvalue=pvalue,
        p_lower=p_lower,
        radius=float(radius),
        status=status,
        n_A=n_a,
        n=cfg.n,
        sigma=cfg.sigma,
        alpha=cfg.alpha,
        seed=cfg.seed,
        rv_alpha=cfg.rv_alpha,
        batch_size=cfg.batch_size,
        selection_counts=[int(c) for c in counts],
    )


def empirical_radius_check(ens, x, cert, trials, seed):
    """Fraction des requêtes bruitées en x+δ (‖δ‖₂ = R) qui donnent cert.label."""
    if cert.radius == 0:
        return 1.0
    if trials < 1:
        raise ParameterError("trials >= 1 requis")
    x = _check_input(ens, x)
    directions = stream(seed, 0).standard_normal((trials, *x.shape))
    norms = np.sqrt((directions.reshape(trials, -1) ** 2).sum(axis=1))
    deltas = cert.radius * directions / norms.reshape(-1, *[1] * x.ndim)
    shifted = np.clip(x + deltas, 0.0, 1.0)
    policy = QueryPolicy(noise_sigma=cert.sigma, seed=derive_seed(seed, 1))
    results = noisy_queries(ens, shifted, policy, list(range(trials)))
    return float(np.mean([r.label == cert.label for r in results]))


def smoothed_predict(ens, x, sigma, n, seed, batch_size=500):
    """Estimation de g(x) : vote pluralitaire sur n requêtes bruitées."""
    if not sigma > 0 or n < 1:
        raise ParameterError("sigma > 0 et n >= 1 requis")
    x = _check_input(ens, x)
    labels = _sample_labels(ens, x, sigma, seed, n, batch_size)
    return int(np.argmax(np.bincount(labels, minlength=ens.label_count)))


def save_certificates(certificates, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for cert in certificates:
            f.write(json.dumps(cert.to_dict()) + "\n")


def load_certificates(path):
    with open(path, encoding="utf-8") as f:
        return [Certificate.from_dict(json.loads(line)) for line in f if line.strip()]
