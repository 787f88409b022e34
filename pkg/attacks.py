"""
Attaques ciblées par pénalité (style Carlini-Wagner L²) et attaques par
superposition des perturbations de plus petite norme.
"""

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.special import log_softmax

from ensemble_defense import QueryPolicy
from errors import (
    ConsistencyError,
    DivergenceError,
    InsufficientExamplesError,
    ParameterError,
    ShapeError,
    UndefinedMetricError,
)
from runtime import derive_seed, ordered_map
from tensor_net import softmax_t, value_and_input_gradient

PENALTY_KINDS = ("loss", "margin")
ATTACK_SURFACES = ("clean_logits", "noisy_logits")
SPARSE_RATIO = 0.10
TANH_SHRINK = 1 - 1e-6
ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
C_UPPER_SENTINEL = 1e10

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttackConfig:
    """`c` pondère la pénalité : min ‖x′−s‖² + c·pénalité(x′, t)."""

    penalty_kind: str = "margin"
    c_init: float = 1e-2
    c_search_steps: int = 7
    iterations: int = 300
    step_size: float = 0.01
    kappa: float = 0.0
    seed: int = 0
    attack_surface: str = "clean_logits"
    surface_sigma: float = 0.0

    def __post_init__(self):
        if self.penalty_kind not in PENALTY_KINDS:
            raise ParameterError(f"penalty_kind inconnu : {self.penalty_kind}")
        if self.attack_surface not in ATTACK_SURFACES:
            raise ParameterError(f"attack_surface inconnue : {self.attack_surface}")
        if not self.c_init > 0 or not self.step_size > 0:
            raise ParameterError("c_init > 0 et step_size > 0 requis")
        if self.c_search_steps < 1 or self.iterations < 1:
            raise ParameterError("c_search_steps >= 1 et iterations >= 1 requis")
        if self.kappa < 0 or self.surface_sigma < 0:
            raise ParameterError("kappa >= 0 et surface_sigma >= 0 requis")
        if self.attack_surface == "noisy_logits" and self.surface_sigma == 0:
            raise ParameterError("la surface bruitée demande surface_sigma > 0")


@dataclass(frozen=True, eq=False)
class AdversarialExample:
    source_index: int
    true_label: int
    original: np.ndarray
    delta: np.ndarray
    target: int
    crafted_on: int
    success_on_crafted: bool
    components: tuple = ()

    @property
    def adversarial(self):
        return np.clip(self.original + self.delta, 0.0, 1.0)

    @property
    def l2(self):
        return float(np.linalg.norm(self.adversarial - self.original))

    @property
    def perturbation(self):
        return perturbation(self.adversarial, self.original)

    @property
    def composite(self):
        return self.crafted_on == -1

    def to_dict(self):
        flat = self.delta.ravel()
        nonzero = np.flatnonzero(flat)
        if len(nonzero) <= SPARSE_RATIO * flat.size:
            delta = {"sparse": [[int(i), float(flat[i])] for i in nonzero]}
        else:
            delta = {"dense": flat.tolist()}
        return {
            "source_index": int(self.source_index),
            "true_label": int(self.true_label),
            "target": int(self.target),
            "crafted_on": int(self.crafted_on),
            "components": [int(c) for c in self.components],
            "success_on_crafted": bool(self.success_on_crafted),
            "shape": list(self.original.shape),
            "original": self.original.ravel().tolist(),
            "delta": delta,
            "l2": self.l2,
        }

    @classmethod
    def from_dict(cls, doc):
        shape = tuple(doc["shape"])
        original = np.asarray(doc["original"], dtype=np.float64).reshape(shape)
        delta = np.zeros(original.size)
        if "sparse" in doc["delta"]:
            for index, value in doc["delta"]["sparse"]:
                delta[index] = value
        else:
            delta = np.asarray(doc["delta"]["dense"], dtype=np.float64)
        return cls(
            source_index=doc["source_index"],
            true_label=doc["true_label"],
            original=original,
            delta=delta.reshape(shape),
            target=doc["target"],
            crafted_on=doc["crafted_on"],
            success_on_crafted=doc["success_on_crafted"],
            components=tuple(doc.get("components", ())),
        )


def save_examples(examples, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for example in examples:
            f.write(json.dumps(example.to_dict()) + "\n")


def load_examples(path):
    with open(path, encoding="utf-8") as f:
        return [AdversarialExample.from_dict(json.loads(line)) for line in f if line.strip()]


def perturbation(a, s):
    a, s = np.asarray(a, dtype=np.float64), np.asarray(s, dtype=np.float64)
    if a.shape != s.shape:
        raise ShapeError(f"formes différentes : {a.shape} / {s.shape}")
    norm_s = np.linalg.norm(s)
    if norm_s == 0:
        raise UndefinedMetricError("perturbation relative indéfinie pour ‖s‖ = 0")
    return float(np.linalg.norm(a - s) / norm_s)


def margin_penalty(z, t, kappa=0.0):
    others = np.array(z, dtype=np.float64)
    others[t] = -np.inf
    return float(max(np.max(others) - z[t], -kappa))


def _penalty_objective(cfg, t, temperature):
    if cfg.penalty_kind == "loss":
        def objective(z):
            grad = softmax_t(z, temperature)
            grad[t] -= 1.0
            return -log_softmax(z / temperature)[t], grad / temperature
        return objective

    def objective(z):
        others = np.array(z)
        others[t] = -np.inf
        rival = int(np.argmax(others))
        grad = np.zeros_like(z)
        margin = z[rival] - z[t]
        if margin <= -cfg.kappa:
            return -cfg.kappa, grad
        grad[rival], grad[t] = 1.0, -1.0
        return margin, grad
    return objective


def _to_box(w):
    return (np.tanh(w) + 1.0) / 2.0


class _Crafter:
    """Une optimisation ciblée (réseau, s, t) ; garde le plus petit itéré réussi."""

    def __init__(self, net, s, t, cfg):
        self.net, self.s, self.t, self.cfg = net, s, t, cfg
        self.objective = _penalty_objective(cfg, t, net.temperature)
        self.policy = None
        if cfg.attack_surface == "noisy_logits":
            self.policy = QueryPolicy(noise_sigma=cfg.surface_sigma, seed=cfg.seed)
        self.queries = 0
        self.best_l2 = np.inf
        self.best = None
        self.closest_penalty = np.inf
        self.closest = s.copy()

    def observe(self, x):
        """(z, pénalité, gradient d'entrée) sur la surface d'attaque."""
        if self.policy is not None:
            x = x + self.policy.noise(x.shape, self.queries)
        self.queries += 1
        return value_and_input_gradient(self.net, x, self.objective)

    def run(self, c):
        w = np.arctanh((2.0 * self.s - 1.0) * TANH_SHRINK)
        m, v = np.zeros_like(w), np.zeros_like(w)
        succeeded = False
        for step in range(self.cfg.iterations + 1):
            x = _to_box(w)
            z, penalty, grad_pen = self.observe(x)
            if not (np.all(np.isfinite(w)) and np.isfinite(penalty)):
                raise DivergenceError(f"itéré non fini (c={c:g}, étape {step})")
            l2 = float(np.linalg.norm(x - self.s))
            if int(np.argmax(z)) == self.t:
                succeeded = True
                if l2 < self.best_l2:
                    self.best_l2, self.best = l2, x
            elif self.best is None and penalty < self.closest_penalty:
                self.closest_penalty, self.closest = penalty, x
            if step == self.cfg.iterations:
                break
            grad = (2.0 * (x - self.s) + c * grad_pen) * 2.0 * x * (1.0 - x)
            m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * grad
            v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * grad ** 2
            m_hat = m / (1 - ADAM_BETA1 ** (step + 1))
            v_hat = v / (1 - ADAM_BETA2 ** (step + 1))
            w = w - self.cfg.step_size * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        return succeeded


def craft(net, s, t, cfg, source_index=-1, true_label=-1, crafted_on=0):
    s = np.asarray(s, dtype=np.float64)
    if s.shape != net.input_shape:
        raise ShapeError(f"entrée {s.shape} incompatible avec {net.input_shape}")
    if not 0 <= t < net.label_count:
        raise ParameterError(f"cible {t} hors de [0, {net.label_count})")

    def example(adversarial, success):
        return AdversarialExample(
            source_index=source_index,
            true_label=true_label,
            original=s,
            delta=adversarial - s,
            target=t,
            crafted_on=crafted_on,
            success_on_crafted=success,
        )

    crafter = _Crafter(net, s, t, cfg)
    z, _, _ = crafter.observe(s)
    if int(np.argmax(z)) == t:
        return example(s.copy(), True)

    c, lower, upper = cfg.c_init, 0.0, C_UPPER_SENTINEL
    for _ in range(cfg.c_search_steps):
        if crafter.run(c):
            upper = min(upper, c)
            c = (lower + upper) / 2.0
        else:
            lower = max(lower, c)
            c = (lower + upper) / 2.0 if upper < C_UPPER_SENTINEL else c * 10.0

    if crafter.best is None:
        logger.debug("⚠️ échec de l'attaque vers %d (membre %d)", t, crafted_on)
        return example(crafter.closest, False)
    return example(crafter.best, True)


def smallest_perturbations(examples, k):
    order = np.argsort([e.perturbation for e in examples], kind="stable")
    return [int(i) for i in order[:k]]


def _superposition_pool(examples, k):
    if k not in (2, 3):
        raise ParameterError(f"superposition de {k} exemples non supportée (2 ou 3)")
    if not examples:
        raise InsufficientExamplesError("aucun exemple à superposer")
    first = examples[0]
    for e in examples[1:]:
        if e.target != first.target or not np.array_equal(e.original, first.original):
            raise ConsistencyError("les exemples superposés doivent partager s et t")
    pool = [e for e in examples if e.success_on_crafted]
    if len(pool) < k:
        raise InsufficientExamplesError(f"{len(pool)} exemples réussis, {k} requis")
    return [pool[i] for i in smallest_perturbations(pool, k)]


def superimpose(examples, k):
    chosen = _superposition_pool(examples, k)
    s = chosen[0].original
    return np.clip(s + sum(e.delta for e in chosen), 0.0, 1.0)


def superimposed_example(examples, k):
    """Composite SIk ; success_on_crafted reflète celui de ses composantes."""
    chosen = _superposition_pool(examples, k)
    first = chosen[0]
    composite = np.clip(first.original + sum(e.delta for e in chosen), 0.0, 1.0)
    return AdversarialExample(
        source_index=first.source_index,
        true_label=first.true_label,
        original=first.original,
        delta=composite - first.original,
        target=first.target,
        crafted_on=-1,
        success_on_crafted=True,
        components=tuple(e.crafted_on for e in chosen),
    )


def sweep_jobs(samples, targets, member_count, label_count):
    """Triplets (échantillon, cible, membre) dans l'ordre échantillon/cible/membre."""
    jobs = []
    for i in range(len(samples)):
        true_label = int(samples.labels[i])
        sample_targets = range(label_count) if targets is None else targets
        for t in sample_targets:
            if t == true_label:
                continue
            jobs.extend((i, int(t), member) for member in range(member_count))
    return jobs


def single_network_sweep(ens, samples, targets, cfg, source_indices=None):
    indices = list(range(len(samples))) if source_indices is None else list(source_indices)
    jobs = sweep_jobs(samples, targets, len(ens), ens.label_count)
    logger.info("🎯 %d attaques (%d échantillons, %d membres)", len(jobs), len(samples), len(ens))

    def run(job):
        i, t, member = job
        job_cfg = replace(cfg, seed=derive_seed(cfg.seed, indices[i], t, member))
        return craft(
            ens.members[member],
            samples.inputs[i],
            t,
            job_cfg,
            source_index=indices[i],
            true_label=int(samples.labels[i]),
            crafted_on=member,
        )

    examples = ordered_map(run, jobs)
    rate = np.mean([e.success_on_crafted for e in examples]) if examples else 0.0
    logger.info("✅ taux de réussite sur le réseau attaqué : %.2f%%", 100 * rate)
    return examples
