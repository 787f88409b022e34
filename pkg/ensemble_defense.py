"""
Défense par ensemble : vote majoritaire, logits bruités (NL) et
vérification de rang (RV).
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import binomtest

from errors import ParameterError, ShapeError
from runtime import ordered_map, stream
from tensor_net import layer_output, logits, predict

ABSTAIN = -1

logger = logging.getLogger(__name__)


class Ensemble:
    def __init__(self, members):
        self.members = tuple(members)
        if not self.members:
            raise ParameterError("un ensemble contient au moins un réseau")
        first = self.members[0]
        for net in self.members[1:]:
            if net.input_shape != first.input_shape or net.label_count != first.label_count:
                raise ShapeError("les membres de l'ensemble n'ont pas la même forme")

    def __len__(self):
        return len(self.members)

    @property
    def input_shape(self):
        return self.members[0].input_shape

    @property
    def label_count(self):
        return self.members[0].label_count

    @property
    def temperatures(self):
        return [net.temperature for net in self.members]


@dataclass(frozen=True)
class QueryPolicy:
    noise_sigma: float = 0.0
    noise_kind: str = "gaussian"
    rv_alpha: float = None
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ParameterError(f"noise_sigma doit être >= 0 (reçu {self.noise_sigma})")
        if self.noise_kind != "gaussian":
            raise ParameterError(f"bruit non supporté : {self.noise_kind}")
        if self.rv_alpha is not None and not 0 < self.rv_alpha < 1:
            raise ParameterError(f"rv_alpha hors de (0,1) : {self.rv_alpha}")

    @property
    def name(self):
        if self.noise_sigma == 0 and self.rv_alpha is None:
            return "plain"
        name = "NL" if self.noise_sigma > 0 else "plain"
        if self.rv_alpha is not None:
            name += f"+RV({self.rv_alpha:g})"
        return name

    def noise(self, shape, query_id=0):
        if self.noise_sigma == 0:
            return np.zeros(shape)
        return self.noise_sigma * stream(self.seed, query_id).standard_normal(shape)


@dataclass(frozen=True, eq=False)
class VoteResult:
    label: int
    counts: np.ndarray
    top2: tuple
    rv_pvalue: float = None

    @property
    def abstained(self):
        return self.label == ABSTAIN

    def to_dict(self):
        y_a, n_a, y_b, n_b = self.top2
        return {
            "label": "abstain" if self.abstained else int(self.label),
            "counts": [int(c) for c in self.counts],
            "top2": {"y_A": int(y_a), "n_A": int(n_a), "y_B": int(y_b), "n_B": int(n_b)},
            "rv_pvalue": None if self.rv_pvalue is None else float(self.rv_pvalue),
        }


def _check_inputs(ens, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape == ens.input_shape:
        return x[None], True
    if x.shape[1:] == ens.input_shape:
        return x, False
    raise ShapeError(f"entrée {x.shape} incompatible avec {ens.input_shape}")


def vote_counts(ens, xs):
    """Matrice (B, label_count) des votes des membres pour un lot d'entrées."""
    batch, _ = _check_inputs(ens, xs)
    answers = ordered_map(lambda net: predict(net, batch), ens.members)
    counts = np.zeros((len(batch), ens.label_count), dtype=np.int64)
    for labels in answers:
        counts[np.arange(len(batch)), labels] += 1
    return counts


def top2(counts):
    counts = np.asarray(counts)
    y_a = int(np.argmax(counts))
    rest = counts.copy()
    rest[y_a] = -1
    y_b = int(np.argmax(rest))
    return y_a, int(counts[y_a]), y_b, int(counts[y_b])


def tally(counts, rv_alpha=None):
    """Décision de vote à partir d'une ligne de comptes (égalité : plus petit indice)."""
    pair = top2(counts)
    label, pvalue = pair[0], None
    if rv_alpha is not None:
        pvalue, passed = rank_verify(pair[1], pair[3], rv_alpha)
        if not passed:
            label = ABSTAIN
    return VoteResult(label, np.asarray(counts, dtype=np.int64), pair, pvalue)


def vote(ens, x):
    batch, _ = _check_inputs(ens, x)
    if len(batch) != 1:
        raise ShapeError("vote attend une entrée seule ; utiliser vote_counts pour un lot")
    return tally(vote_counts(ens, batch)[0])


def noisy_queries(ens, xs, policy, query_ids):
    """Une requête bruitée par entrée du lot, chacune avec son propre tirage."""
    batch, _ = _check_inputs(ens, xs)
    if len(query_ids) != len(batch):
        raise ShapeError(f"{len(query_ids)} identifiants pour {len(batch)} requêtes")
    if policy.noise_sigma > 0:
        noise = np.stack([policy.noise(ens.input_shape, q) for q in query_ids])
        batch = np.clip(batch + noise, 0.0, 1.0)
    return [tally(row, policy.rv_alpha) for row in vote_counts(ens, batch)]


def noisy_query(ens, x, policy, query_id=0):
    batch, single = _check_inputs(ens, x)
    if not single:
        raise ShapeError("noisy_query attend une entrée seule ; utiliser noisy_queries")
    return noisy_queries(ens, batch, policy, [query_id])[0]


def noisy_layer_output(net, x, layer_index, policy, query_id=0):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != net.input_shape:
        raise ShapeError(f"entrée {x.shape} incompatible avec {net.input_shape}")
    return layer_output(net, x + policy.noise(x.shape, query_id), layer_index)


def noisy_logits(net, xs, policy, query_ids):
    batch = np.asarray(xs, dtype=np.float64)
    noise = np.stack([policy.noise(net.input_shape, q) for q in query_ids])
    return logits(net, batch + noise)


def noisy_predict(net, x, policy, query_id=0):
    return int(np.argmax(noisy_layer_output(net, x, net.logit_index, policy, query_id)))


def rank_pvalue(n_a, n_b):
    n_a, n_b = int(n_a), int(n_b)
    if n_a < 0 or n_b < 0 or n_a + n_b == 0:
        raise ParameterError(f"comptes invalides pour le test de rang : ({n_a}, {n_b})")
    return float(binomtest(n_a, n_a + n_b, 0.5, alternative="two-sided").pvalue)


def rank_verify(n_a, n_b, alpha):
    if not 0 < alpha < 1:
        raise ParameterError(f"alpha hors de (0,1) : {alpha}")
    pvalue = rank_pvalue(n_a, n_b)
    return pvalue, pvalue < alpha


def voting_success_probability(member_accuracies, label_count, trials, seed):
    """Estimation Monte Carlo de P(vote correct) pour des membres indépendants."""
    accuracies = np.asarray(member_accuracies, dtype=np.float64).reshape(-1)
    if accuracies.size == 0 or accuracies.min() < 0 or accuracies.max() > 1:
        raise ParameterError("précisions des membres hors de [0,1]")
    if label_count < 2 or trials < 1:
        raise ParameterError("label_count >= 2 et trials >= 1 requis")
    rng = np.random.default_rng(seed)
    truth = rng.integers(label_count, size=trials)
    correct = rng.random((trials, accuracies.size)) < accuracies
    wrong = (truth[:, None] + 1 + rng.integers(label_count - 1, size=correct.shape)) % label_count
    answers = np.where(correct, truth[:, None], wrong)
    counts = (answers[..., None] == np.arange(label_count)).sum(axis=1)
    return float(np.mean(np.argmax(counts, axis=1) == truth))
