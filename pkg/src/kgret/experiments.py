"""Desk-scale zero-shot experiments on synthetic ontologies.

Each routine generates a graph, trains the shared encoder on self-supervised
pairs and compares it with BM25 and with the untrained encoder. The
acceptance tests and ``scripts/`` both call these.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from kgret.encoder.model import EncoderDims, EncoderModel
from kgret.encoder.tokenizer import train_tokenizer
from kgret.evalkit import DenseSystem, EvalReport, EvalSplit, Regime, evaluate, make_zeroshot_split
from kgret.kg import KnowledgeGraph
from kgret.retrieval import ConceptCatalog, build_bm25_index, build_dense_index
from kgret.synthkg import NoiseRates, SynthOutput, SynthSpec, acronym_slice, generate
from kgret.taskgen import (
    TaskDataset,
    TrainingPair,
    filter_pairs,
    gen_graph_pairs,
    gen_synonym_pairs,
    make_comb,
    split_80_20,
    supervised_pairs,
)
from kgret.trainer import TrainConfig, TrainLog, train, train_multitask

log = logging.getLogger(__name__)


@dataclass
class DeskConfig:
    spec: SynthSpec = field(default_factory=lambda: SynthSpec(
        n_concepts=500, synonyms_per_concept=(2, 5), edge_density=0.01,
        surface_noise=NoiseRates(acronym_rate=0.3), seed=0,
    ))
    vocab_size: int = 4096
    dim: int = 128
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 512
    max_len: int = 32
    model_seed: int = 0
    split_seed: int = 0
    train: TrainConfig = field(default_factory=lambda: TrainConfig(max_epochs=10))


@dataclass
class ExperimentResult:
    reports: dict[tuple[str, str], EvalReport]
    logs: dict[str, TrainLog] = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def get(self, system: str, split: str) -> EvalReport:
        return self.reports[(system, split)]


def tokenizer_corpus(pairs: Sequence[TrainingPair]) -> list[str]:
    return sorted({t for p in pairs for t in (p.mention_text, p.concept_text)})


def fresh_encoder(corpus: Sequence[str], cfg: DeskConfig) -> EncoderModel:
    tok = train_tokenizer(list(corpus), cfg.vocab_size)
    dims = EncoderDims(tok.vocab_size, cfg.dim, cfg.layers, cfg.heads, cfg.ffn_dim, cfg.max_len)
    return EncoderModel(dims, tokenizer=tok, seed=cfg.model_seed)


def _eval_all(systems: dict, splits: Sequence[EvalSplit], catalog: ConceptCatalog) -> dict:
    out = {}
    for name, system in systems.items():
        for split in splits:
            out[(name, split.name)] = evaluate(system, split, catalog, system_name=name)
    return out


def _dense(model: EncoderModel, catalog: ConceptCatalog, name: str) -> DenseSystem:
    return DenseSystem(build_dense_index(model, catalog), model, name)


def run_mentions_only(cfg: DeskConfig, synth: SynthOutput | None = None) -> ExperimentResult:
    """Train on the synonym task; evaluate unseen mentions of seen concepts."""
    synth = synth or generate(cfg.spec)
    kg = synth.kg
    ds = split_80_20(gen_synonym_pairs(kg), cfg.split_seed)
    untrained = fresh_encoder(tokenizer_corpus(ds.train), cfg)
    trained, tlog = train(untrained, ds, cfg.train)

    catalog = ConceptCatalog.from_kg(kg)
    splits = [EvalSplit("in-domain", synth.test_in_domain, Regime.MENTIONS_ONLY),
              EvalSplit("acronym", acronym_slice(synth.test_in_domain), Regime.MENTIONS_ONLY)]
    systems = {"bm25": build_bm25_index(catalog),
               "untrained": _dense(untrained, catalog, "untrained"),
               "trained": _dense(trained, catalog, "trained")}
    return ExperimentResult(_eval_all(systems, splits, catalog), {"trained": tlog},
                            {"train_pairs": len(ds.train), "dev_pairs": len(ds.dev)})


def holdout_setup(cfg: DeskConfig, synth: SynthOutput, fraction: float = 0.2, seed: int = 0):
    split, keep = make_zeroshot_split(synth.kg, synth.mention_pool, Regime.MENTIONS_AND_CONCEPTS,
                                      fraction, seed, name="held-out")
    return split, keep


def run_mentions_and_concepts(cfg: DeskConfig, synth: SynthOutput | None = None,
                              fraction: float = 0.2) -> ExperimentResult:
    """Hold out concepts from every training pair; evaluate their mentions."""
    synth = synth or generate(cfg.spec)
    kg = synth.kg
    split, keep = holdout_setup(cfg, synth, fraction, cfg.split_seed)
    pairs = filter_pairs(gen_synonym_pairs(kg), keep)
    ds = split_80_20(pairs, cfg.split_seed)
    touched = {c for p in ds.train + ds.dev for c in (p.mention_node, p.concept_node)}
    untrained = fresh_encoder(tokenizer_corpus(ds.train), cfg)
    trained, tlog = train(untrained, ds, cfg.train)

    catalog = ConceptCatalog.from_kg(kg)
    systems = {"bm25": build_bm25_index(catalog),
               "untrained": _dense(untrained, catalog, "untrained"),
               "trained": _dense(trained, catalog, "trained")}
    info = {"held_out": len(split.held_out_concepts), "leaked": len(touched & split.held_out_concepts),
            "train_pairs": len(ds.train)}
    return ExperimentResult(_eval_all(systems, [split], catalog), {"trained": tlog}, info)


def auxiliary_datasets(kg: KnowledgeGraph, synth: SynthOutput, keep, seed: int) -> tuple[TaskDataset, TaskDataset]:
    """Primary: annotated mentions (supervised). Auxiliary: comb of the
    synonym and graph tasks. Both exclude held-out concepts."""
    primary = split_80_20(filter_pairs(supervised_pairs(kg, synth.train_annotations), keep), seed, "supervised")
    syn = split_80_20(filter_pairs(gen_synonym_pairs(kg), keep), seed)
    graph = split_80_20(filter_pairs(gen_graph_pairs(kg), keep), seed)
    return primary, make_comb([syn, graph], seed)


def run_auxiliary(cfg: DeskConfig, seeds: Sequence[int] = (0, 1, 2), fraction: float = 0.2) -> ExperimentResult:
    """Primary-only vs primary + comb auxiliary loss, over several seeds.

    The seed drives the model init, batching and the holdout draw; the
    ontology itself is fixed by ``cfg.spec``.
    """
    synth = generate(cfg.spec)
    kg = synth.kg
    catalog = ConceptCatalog.from_kg(kg)
    reports, logs = {}, {}
    for seed in seeds:
        split, keep = holdout_setup(cfg, synth, fraction, seed)
        primary, aux = auxiliary_datasets(kg, synth, keep, seed)
        run_cfg = replace(cfg, model_seed=seed, train=replace(cfg.train, seed=seed))
        base = fresh_encoder(tokenizer_corpus(primary.train + aux.train), run_cfg)
        only, log_only = train(base, primary, run_cfg.train)
        multi, log_multi = train_multitask(base, primary, aux, run_cfg.train)
        split.name = f"held-out-s{seed}"
        for name, model in (("primary-only", only), ("multitask", multi)):
            reports[(name, split.name)] = evaluate(_dense(model, catalog, name), split, catalog, system_name=name)
        logs[f"primary-only-s{seed}"] = log_only
        logs[f"multitask-s{seed}"] = log_multi
        log.info("seed %d: primary-only R@25 %.4f, multitask R@25 %.4f", seed,
                 reports[("primary-only", split.name)].r25, reports[("multitask", split.name)].r25)
    return ExperimentResult(reports, logs, {"seeds": list(seeds)})


def median_r25(result: ExperimentResult, system: str) -> float:
    return float(np.median([r.r25 for (s, _), r in result.reports.items() if s == system]))
