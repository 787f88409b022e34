"""
Orchestration des expériences : entraînement de l'ensemble, balayages
d'attaques, tableaux de résultats, certification et manifeste.
"""

import json
import logging
import platform
from contextlib import contextmanager
from dataclasses import dataclass, replace
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np
import pandas as pd

from attacks import (
    craft,
    load_examples,
    save_examples,
    single_network_sweep,
    superimposed_example,
)
from certify import certify, save_certificates, smoothed_predict
from config import STAGES
from data_io import PartitionPlan, load_idx, partition, synth_blobs
from ensemble_defense import (
    ABSTAIN,
    Ensemble,
    QueryPolicy,
    noisy_logits,
    noisy_predict,
    noisy_queries,
    vote_counts,
)
from errors import DataError, EmptyDatasetError, StageError
from runtime import derive_seed, ordered_map
from tensor_net import (
    accuracy,
    build_network,
    conv_specs,
    dense_specs,
    load_network,
    predict,
    save_network,
    train,
)

OUTCOMES = ("correct", "target", "other", "abstain")
FLOAT_FORMAT = "%.10g"
VERSIONED_PACKAGES = ("numpy", "scipy", "pandas")

logger = logging.getLogger(__name__)


def write_table(frame, path):
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)


def load_dataset(spec, seed):
    if spec.kind == "blobs":
        ds = synth_blobs(spec.class_count, spec.per_class, spec.dim, spec.spread, seed)
    else:
        ds = load_idx(spec.images, spec.labels)
    if spec.limit is not None:
        ds = ds.head(spec.limit)
    return ds


def shape_for(ds, architecture):
    """Entrées aplaties pour un réseau dense, (C, H, W) pour un réseau convolutif."""
    if architecture.kind == "dense":
        return ds.reshape((int(np.prod(ds.input_shape)),))
    if len(ds.input_shape) == 2:
        return ds.reshape((1, *ds.input_shape))
    return ds


def member_specs(cfg, ds):
    arch, keep = cfg.architecture, cfg.train.dropout_keep
    label_count = cfg.dataset.class_count
    if arch.kind == "dense":
        return dense_specs(ds.input_shape[0], arch.hidden, label_count, keep)
    hidden = arch.hidden[0] if arch.hidden else 32
    return conv_specs(arch.channels, hidden, label_count, keep, ds.input_shape[0], ds.input_shape[1:])


def split_dataset(cfg, ds):
    seed = derive_seed(cfg.stage_seed("train"), 0)
    if cfg.training_mode == "partitioned":
        plan = PartitionPlan(cfg.members, cfg.part_size, cfg.validation_size, seed)
        return partition(ds, plan)
    plan = PartitionPlan(1, len(ds) - cfg.validation_size, cfg.validation_size, seed)
    (shared,), validation = partition(ds, plan)
    return [shared] * cfg.members, validation


def train_ensemble(cfg, dataset, split=None):
    """Membres l = 1..m entraînés à T_l = base·l ; retourne (Ensemble, rapport)."""
    parts, validation = split if split is not None else split_dataset(cfg, dataset)
    seed = cfg.stage_seed("train")
    specs = member_specs(cfg, dataset)
    temperatures = cfg.temperatures()

    def fit(l):
        net = build_network(
            specs, dataset.input_shape, temperatures[l], cfg.dataset.class_count, derive_seed(seed, 1, l)
        )
        logger.info("🔧 membre %d : T=%g, %d exemples", l, temperatures[l], len(parts[l]))
        return train(net, parts[l], replace(cfg.train, seed=derive_seed(seed, 2, l)))

    members = ordered_map(fit, range(cfg.members))
    report = pd.DataFrame(
        {
            "member": range(cfg.members),
            "temperature": temperatures,
            "train_size": [len(p) for p in parts],
            "validation_accuracy": [
                accuracy(net, validation) if len(validation) else np.nan for net in members
            ],
        }
    )
    logger.info("✅ ensemble de %d réseaux entraîné", cfg.members)
    return Ensemble(members), report


def save_ensemble(ens, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for l, net in enumerate(ens.members):
        save_network(net, directory / f"member_{l:03d}.json")


def load_ensemble(directory):
    paths = sorted(Path(directory).glob("member_*.json"))
    if not paths:
        raise DataError(f"aucun réseau dans {directory}")
    return Ensemble([load_network(p) for p in paths])


def policy_variants(noise_sigma, rv_alpha, seed):
    """Variantes {plain, NL, NL+RV(α)} évaluées pour chaque attaque."""
    variants = [QueryPolicy(seed=seed)]
    if noise_sigma > 0:
        variants.append(QueryPolicy(noise_sigma=noise_sigma, seed=seed))
    if rv_alpha is not None:
        variants.append(QueryPolicy(noise_sigma=noise_sigma, rv_alpha=rv_alpha, seed=seed))
    return variants


def bin_edges(values, bin_count):
    top = float(np.max(values)) if len(values) else 0.0
    return np.linspace(0.0, top if top > 0 else 1.0, bin_count + 1)


def bin_index(values, edges):
    bins = np.searchsorted(edges, values, side="right") - 1
    return np.clip(bins, 0, len(edges) - 2)


def _outcome(label, example):
    if label == ABSTAIN:
        return "abstain"
    if label == example.true_label:
        return "correct"
    if label == example.target:
        return "target"
    return "other"


def _ratio(numerator, denominator):
    return numerator / denominator if denominator else np.nan


def distinct_originals(examples):
    seen = {}
    for e in examples:
        seen.setdefault(e.source_index, e)
    return list(seen.values())


@dataclass(frozen=True)
class OutcomeTable:
    rows: pd.DataFrame
    histograms: pd.DataFrame

    def write(self, directory, stem="outcomes"):
        write_table(self.rows, Path(directory) / f"{stem}.csv")
        write_table(self.histograms, Path(directory) / f"{stem}_histograms.csv")


def evaluate_outcomes(ens, examples, policies, bin_count=40):
    if not examples:
        raise EmptyDatasetError("aucun exemple adverse à évaluer")
    adversarial = np.stack([e.adversarial for e in examples])
    ratios = np.array([e.perturbation for e in examples])
    originals = distinct_originals(examples)
    clean_inputs = np.stack([e.original for e in originals])
    edges = bin_edges(ratios, bin_count)
    bins = bin_index(ratios, edges)

    rows, histograms = [], []
    for policy in policies:
        attacked = noisy_queries(ens, adversarial, policy, list(range(len(examples))))
        clean = noisy_queries(
            ens, clean_inputs, policy, [len(examples) + j for j in range(len(originals))]
        )
        outcomes = np.array([_outcome(r.label, e) for r, e in zip(attacked, examples)])
        clean_correct = sum(r.label == e.true_label for r, e in zip(clean, originals))
        clean_answered = sum(not r.abstained for r in clean)
        row = {
            "variant": policy.name,
            "examples": len(examples),
            "clean_accuracy_answered": _ratio(clean_correct, clean_answered),
            "clean_accuracy_abstain_error": clean_correct / len(originals),
            "attack_accuracy_answered": _ratio(
                np.sum(outcomes == "correct"), np.sum(outcomes != "abstain")
            ),
            "attack_accuracy_abstain_error": np.mean(outcomes == "correct"),
        }
        for outcome in OUTCOMES:
            mask = outcomes == outcome
            row[f"{outcome}_pct"] = 100.0 * np.mean(mask)
            row[f"{outcome}_mean_perturbation"] = float(np.mean(ratios[mask])) if mask.any() else np.nan
            counts = np.bincount(bins[mask], minlength=bin_count)
            histograms.append(
                pd.DataFrame(
                    {
                        "variant": policy.name,
                        "outcome": outcome,
                        "bin": range(bin_count),
                        "bin_low": edges[:-1],
                        "bin_high": edges[1:],
                        "count": counts,
                    }
                )
            )
        rows.append(row)
        logger.info(
            "🛡️ %s : correct %.2f%% / cible %.2f%% / autre %.2f%% / abstention %.2f%%",
            policy.name, row["correct_pct"], row["target_pct"], row["other_pct"], row["abstain_pct"],
        )
    return OutcomeTable(pd.DataFrame(rows), pd.concat(histograms, ignore_index=True))


def member_accuracy_table(ens, examples, sigma, seed):
    """Précision moyenne d'un réseau seul, propre et attaqué, avec et sans NL."""
    if not examples:
        raise EmptyDatasetError("aucun exemple adverse à évaluer")
    originals = distinct_originals(examples)
    clean_x = np.stack([e.original for e in originals])
    clean_y = np.array([e.true_label for e in originals])
    attack_x = np.stack([e.adversarial for e in examples])
    attack_y = np.array([e.true_label for e in examples])

    rows = []
    for l, net in enumerate(ens.members):
        row = {
            "member": str(l),
            "temperature": net.temperature,
            "clean_accuracy": float(np.mean(predict(net, clean_x) == clean_y)),
            "attack_accuracy": float(np.mean(predict(net, attack_x) == attack_y)),
        }
        if sigma > 0:
            policy = QueryPolicy(noise_sigma=sigma, seed=derive_seed(seed, l))
            clean_ids = [len(examples) + j for j in range(len(originals))]
            clean_nl = np.argmax(noisy_logits(net, clean_x, policy, clean_ids), axis=1)
            attack_nl = np.argmax(noisy_logits(net, attack_x, policy, range(len(examples))), axis=1)
            row["clean_accuracy_nl"] = float(np.mean(clean_nl == clean_y))
            row["attack_accuracy_nl"] = float(np.mean(attack_nl == attack_y))
        rows.append(row)
    table = pd.DataFrame(rows)
    mean = table.drop(columns=["member"]).mean().to_dict()
    mean["member"] = "mean"
    return pd.concat([table, pd.DataFrame([mean])], ignore_index=True)


@dataclass(frozen=True)
class BinSeries:
    """Par intervalle de perturbation : bascules des membres et de l'ensemble."""

    frame: pd.DataFrame
    totals: dict

    def write(self, path):
        write_table(self.frame, path)


def transfer_series(ens, examples, bin_count=40, policy=None):
    """Bascules par intervalle ; avec une politique bruitée, ajoute la précision NL par intervalle."""
    if not examples:
        raise EmptyDatasetError("aucun exemple pour la série de transférabilité")
    clean_x = np.stack([e.original for e in examples])
    attack_x = np.stack([e.adversarial for e in examples])
    targets = np.array([e.target for e in examples])
    truth = np.array([e.true_label for e in examples])
    ratios = np.array([e.perturbation for e in examples])

    member_to_target = np.zeros(len(examples))
    member_elsewhere = np.zeros(len(examples))
    for net in ens.members:
        before, after = predict(net, clean_x), predict(net, attack_x)
        changed = after != before
        member_to_target += changed & (after == targets)
        member_elsewhere += changed & (after != targets)
    ensemble_before = np.argmax(vote_counts(ens, clean_x), axis=1)
    ensemble_after = np.argmax(vote_counts(ens, attack_x), axis=1)
    ensemble_changed = ensemble_after != ensemble_before
    ensemble_to_target = ensemble_changed & (ensemble_after == targets)
    ensemble_elsewhere = ensemble_changed & (ensemble_after != targets)

    edges = bin_edges(ratios, bin_count)
    bins = bin_index(ratios, edges)
    count = np.bincount(bins, minlength=bin_count)

    def per_bin(values):
        return np.bincount(bins, weights=values.astype(np.float64), minlength=bin_count)

    sums = {
        "member_target_flips": per_bin(member_to_target),
        "member_other_flips": per_bin(member_elsewhere),
        "ensemble_target_changes": per_bin(ensemble_to_target),
        "ensemble_other_changes": per_bin(ensemble_elsewhere),
    }
    occupied = np.maximum(count, 1)
    frame = pd.DataFrame(
        {
            "bin": range(bin_count),
            "bin_low": edges[:-1],
            "bin_high": edges[1:],
            "midpoint": (edges[:-1] + edges[1:]) / 2,
            "count": count,
            "mean_member_target_flips": sums["member_target_flips"] / occupied,
            "mean_member_other_flips": sums["member_other_flips"] / occupied,
            "ensemble_target_frequency": sums["ensemble_target_changes"] / len(examples),
            "ensemble_other_frequency": sums["ensemble_other_changes"] / len(examples),
            "ensemble_accuracy": np.where(
                count > 0, per_bin(ensemble_after == truth) / occupied, np.nan
            ),
            **{f"{name}_total": values for name, values in sums.items()},
        }
    )
    if policy is not None and policy.noise_sigma > 0:
        answers = noisy_queries(ens, attack_x, policy, list(range(len(examples))))
        correct = np.array([r.label for r in answers]) == truth
        frame.insert(
            frame.columns.get_loc("ensemble_accuracy") + 1,
            "ensemble_accuracy_nl",
            np.where(count > 0, per_bin(correct) / occupied, np.nan),
        )
    totals = {
        "examples": len(examples),
        "member_target_flips": int(member_to_target.sum()),
        "member_other_flips": int(member_elsewhere.sum()),
        "ensemble_target_changes": int(ensemble_to_target.sum()),
        "ensemble_other_changes": int(ensemble_elsewhere.sum()),
    }
    return BinSeries(frame, totals)


def network_grid(ens, s, t, cfg, policy):
    """Classification de chaque membre sur l'exemple adverse fabriqué contre lui."""
    def cell(l):
        net = ens.members[l]
        example = craft(net, s, t, replace(cfg, seed=derive_seed(cfg.seed, l)), crafted_on=l)
        if policy.noise_sigma > 0:
            return noisy_predict(net, example.adversarial, policy, query_id=l)
        return int(predict(net, example.adversarial))

    return ordered_map(cell, range(len(ens)))


def grid_rows(labels, width=5):
    return [list(labels[i:i + width]) for i in range(0, len(labels), width)]


def superimposition_tests(ens, examples, k):
    """Un composite SIk par couple (échantillon, cible) ayant au moins k succès."""
    groups = {}
    for e in examples:
        if not e.composite:
            groups.setdefault((e.source_index, e.target), []).append(e)
    composites = []
    for group in groups.values():
        if sum(e.success_on_crafted for e in group) >= k:
            composites.append(superimposed_example(group, k))
    logger.info("🎯 SI%d : %d tests sur %d couples (échantillon, cible)", k, len(composites), len(groups))
    return composites


def superimposition_classifications(ens, composites, policies):
    """`composites` : {k: [AdversarialExample]} ; un label par (test, variante)."""
    rows = []
    for k, tests in composites.items():
        if not tests:
            continue
        inputs = np.stack([e.adversarial for e in tests])
        for policy in policies:
            results = noisy_queries(ens, inputs, policy, list(range(len(tests))))
            for e, r in zip(tests, results):
                rows.append(
                    {
                        "attack": f"SI{k}",
                        "variant": policy.name,
                        "source_index": e.source_index,
                        "true_label": e.true_label,
                        "target": e.target,
                        "label": "abstain" if r.abstained else r.label,
                        "outcome": _outcome(r.label, e),
                    }
                )
    return pd.DataFrame(rows, columns=["attack", "variant", "source_index", "true_label", "target", "label", "outcome"])


def robustness_table(ens, certificates, examples, cfg):
    """Rayon certifié contre la plus petite distorsion L² qui change g(x)."""
    seed = cfg.stage_seed("certify")
    rows = []
    for source_index, cert in certificates.items():
        candidates = sorted(
            (e for e in examples if e.source_index == source_index), key=lambda e: e.l2
        )
        breaking, smallest = 0, np.nan
        for j, e in enumerate(candidates):
            label = smoothed_predict(
                ens, e.adversarial, cert.sigma, cfg.robustness_n, derive_seed(seed, source_index, j)
            )
            if label != cert.label:
                breaking += 1
                smallest = e.l2 if np.isnan(smallest) else min(smallest, e.l2)
        rows.append(
            {
                "source_index": source_index,
                "label": cert.label,
                "status": cert.status,
                "radius": cert.radius,
                "min_adversarial_l2": smallest,
                "breaking_examples": breaking,
                "examples": len(candidates),
                "consistent": bool(np.isnan(smallest) or cert.radius <= smallest),
            }
        )
    return pd.DataFrame(rows)


def package_versions():
    versions = {"python": platform.python_version()}
    for name in VERSIONED_PACKAGES:
        try:
            versions[name] = version(name)
        except PackageNotFoundError:
            versions[name] = None
    return versions


class PipelineRunner:
    """
    Exécute les étapes data → train → attack → superimpose → evaluate →
    certify → report dans `cfg.out`. Les artefacts manquants d'une étape sont
    relus depuis le répertoire de sortie.
    """

    def __init__(self, cfg):
        self.cfg = cfg
        self.out_dir = Path(cfg.out)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.status = {}
        self.dataset = None
        self.parts = None
        self.validation = None
        self._ensemble = None
        self._examples = None
        self._composites = None

    @contextmanager
    def stage(self, name):
        logger.info("📂 étape %s", name)
        self.status[name] = "running"
        try:
            yield
        except Exception as e:
            self.status[name] = "failed"
            logger.error("❌ étape %s en échec : %s", name, e)
            self.write_manifest("failed")
            raise StageError(name, e) from e
        self.status[name] = "ok"

    def _path(self, name):
        return self.out_dir / name

    def _require(self, name):
        path = self._path(name)
        if not path.exists():
            raise DataError(f"artefact manquant : {path}")
        return path

    @property
    def ensemble(self):
        if self._ensemble is None:
            self._ensemble = load_ensemble(self._require("members"))
        return self._ensemble

    @property
    def examples(self):
        if self._examples is None:
            self._examples = load_examples(self._require("examples.jsonl"))
        return self._examples

    @property
    def composites(self):
        if self._composites is None:
            self._composites = {k: load_examples(self._require(f"si{k}.jsonl")) for k in (2, 3)}
        return self._composites

    @property
    def policies(self):
        return policy_variants(self.cfg.noise_sigma, self.cfg.rv_alpha, self.cfg.stage_seed("evaluate"))

    def run_data(self):
        ds = load_dataset(self.cfg.dataset, self.cfg.stage_seed("data"))
        self.dataset = shape_for(ds, self.cfg.architecture)
        self.parts, self.validation = split_dataset(self.cfg, self.dataset)
        logger.info("📂 %d exemples, validation %d", len(self.dataset), len(self.validation))

    def run_train(self):
        self._ensemble, report = train_ensemble(self.cfg, self.dataset, (self.parts, self.validation))
        save_ensemble(self._ensemble, self._path("members"))
        write_table(report, self._path("members.csv"))

    def _sweep_samples(self):
        count = max(self.cfg.sample_count, self.cfg.si_sample_count)
        if count > len(self.validation):
            raise DataError(f"{count} échantillons demandés, {len(self.validation)} en validation")
        return self.validation.head(count)

    def run_attack(self):
        samples = self._sweep_samples()
        attack_cfg = replace(self.cfg.attack, seed=self.cfg.stage_seed("attack"))
        self._examples = single_network_sweep(self.ensemble, samples, self.cfg.targets, attack_cfg)
        save_examples(self._examples, self._path("examples.jsonl"))
        if self.cfg.noisy_crafting:
            noisy_cfg = replace(attack_cfg, attack_surface="noisy_logits", surface_sigma=self.cfg.noise_sigma)
            noisy = single_network_sweep(self.ensemble, samples, self.cfg.targets, noisy_cfg)
            save_examples(noisy, self._path("examples_nl.jsonl"))

    def run_superimpose(self):
        pool = [e for e in self.examples if e.source_index < self.cfg.si_sample_count]
        self._composites = {k: superimposition_tests(self.ensemble, pool, k) for k in (2, 3)}
        for k, tests in self._composites.items():
            save_examples(tests, self._path(f"si{k}.jsonl"))

    def _attack_sets(self):
        sets = {"single": [e for e in self.examples if e.source_index < self.cfg.sample_count]}
        noisy_path = self._path("examples_nl.jsonl")
        if self.cfg.noisy_crafting and noisy_path.exists():
            sets["single-nl-crafted"] = [
                e for e in load_examples(noisy_path) if e.source_index < self.cfg.sample_count
            ]
        for k, tests in self.composites.items():
            sets[f"SI{k}"] = tests
        return sets

    def run_evaluate(self):
        rows, histograms = [], []
        sets = self._attack_sets()
        for attack, examples in sets.items():
            if not examples:
                logger.warning("⚠️ aucun exemple pour l'attaque %s", attack)
                continue
            table = evaluate_outcomes(self.ensemble, examples, self.policies, self.cfg.bin_count)
            rows.append(table.rows.assign(attack=attack))
            histograms.append(table.histograms.assign(attack=attack))
        if rows:
            OutcomeTable(pd.concat(rows, ignore_index=True), pd.concat(histograms, ignore_index=True)).write(
                self.out_dir
            )
        if sets["single"]:
            write_table(
                member_accuracy_table(
                    self.ensemble, sets["single"], self.cfg.noise_sigma, self.cfg.stage_seed("evaluate")
                ),
                self._path("member_accuracy.csv"),
            )
        noisy = next((p for p in self.policies if p.noise_sigma > 0 and p.rv_alpha is None), None)
        for attack, name in (("single", "transfer.csv"), ("single-nl-crafted", "transfer_nl.csv")):
            if sets.get(attack):
                series = transfer_series(self.ensemble, sets[attack], self.cfg.bin_count, noisy)
                series.write(self._path(name))
                logger.info("✅ bascules (%s) : %s", attack, series.totals)
        write_table(
            superimposition_classifications(self.ensemble, self.composites, self.policies),
            self._path("si_classifications.csv"),
        )

    def run_certify(self):
        seed = self.cfg.stage_seed("certify")
        samples = self.validation.head(self.cfg.certify_count)

        def one(i):
            return certify(self.ensemble, samples.inputs[i], replace(self.cfg.certify, seed=derive_seed(seed, i)))

        certificates = ordered_map(one, range(len(samples)))
        save_certificates(certificates, self._path("certificates.jsonl"))
        certified = sum(c.certified for c in certificates)
        logger.info("🛡️ %d/%d prédictions certifiées", certified, len(certificates))
        examples = self._examples
        if examples is None and self._path("examples.jsonl").exists():
            examples = self.examples
        if examples:
            table = robustness_table(self.ensemble, dict(enumerate(certificates)), examples, self.cfg)
            write_table(table, self._path("robustness.csv"))

    def grid(self, sample, target, policy=None):
        if not 0 <= sample < len(self.validation):
            raise DataError(f"échantillon {sample} hors de la validation ({len(self.validation)})")
        policy = policy or QueryPolicy(seed=self.cfg.stage_seed("report"))
        attack_cfg = replace(self.cfg.attack, seed=derive_seed(self.cfg.stage_seed("report"), sample, target))
        labels = network_grid(self.ensemble, self.validation.inputs[sample], target, attack_cfg, policy)
        rows = grid_rows(labels)
        frame = pd.DataFrame(rows, columns=[f"c{j}" for j in range(len(rows[0]))])
        write_table(frame, self._path(f"grid_{sample}_{target}_{policy.name}.csv"))
        return labels

    def run_report(self):
        if not len(self.validation):
            return
        sample = 0
        target = (int(self.validation.labels[sample]) + 1) % self.cfg.dataset.class_count
        self.grid(sample, target)
        if self.cfg.noise_sigma > 0:
            self.grid(sample, target, QueryPolicy(self.cfg.noise_sigma, seed=self.cfg.stage_seed("report")))

    def write_manifest(self, status):
        manifest = {
            "status": status,
            "stages": self.status,
            "config": self.cfg.to_dict(),
            "seeds": {name: self.cfg.stage_seed(name) for name in self.status},
            "versions": package_versions(),
        }
        with open(self._path("manifest.json"), "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, ensure_ascii=False)

    def run(self, stages):
        for name in stages:
            with self.stage(name):
                getattr(self, f"run_{name}")()
        self.write_manifest("ok")
        logger.info("✅ résultats écrits dans %s", self.out_dir)
        return self.out_dir


def run_pipeline(cfg):
    return PipelineRunner(cfg).run(STAGES)
