"""``kgret`` command-line driver.

Subcommands communicate through files only. Every invocation writes a run
manifest (JSON) next to its primary output; wall-clock timing goes to a
``.timing.json`` sidecar so the manifest itself is reproducible.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

import kgret
from kgret.encoder.model import EncoderDims, EncoderModel
from kgret.encoder.tokenizer import Tokenizer, train_tokenizer
from kgret.errors import KgretError, PipelineRuntimeError, ValidationError
from kgret.evalkit import (
    DenseSystem,
    EvalSplit,
    Regime,
    evaluate,
    make_zeroshot_split,
    read_mentions,
    read_report,
    summary_table,
    write_mentions,
    write_report,
)
from kgret.kg import GraphKind, dump_kg, load_kg
from kgret.retrieval import (
    INDEX_MAGIC,
    Bm25Index,
    ConceptCatalog,
    DenseIndex,
    build_bm25_index,
    build_dense_index,
    search_bm25,
    search_dense,
)
from kgret.synthkg import NoiseRates, SynthSpec, generate, write_census
from kgret.taskgen import (
    Task,
    TaskDataset,
    default_tasks,
    generate_task,
    make_comb,
    read_pairs,
    split_80_20,
    supervised_pairs,
    task_stats,
    write_pairs,
)
from kgret.trainer import TrainConfig, train, train_multitask

log = logging.getLogger("kgret")


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(message)


# -- run context -------------------------------------------------------------------

def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _portable_argv(argv: list[str]) -> list[str]:
    """argv without --workdir, so manifests do not depend on the run location."""
    out, skip = [], False
    for w in argv:
        if skip:
            skip = False
        elif w == "--workdir":
            skip = True
        elif not w.startswith("--workdir="):
            out.append(w)
    return out


class Run:
    """Resolves paths against the workdir and records inputs and outputs."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = _portable_argv(argv)
        self.workdir = Path(args.workdir)
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.seeds: dict[str, int] = {}
        self.start = time.perf_counter()

    def path(self, rel: str) -> Path:
        return self.workdir / rel

    def input(self, rel: str) -> Path:
        p = self.path(rel)
        if not p.exists():
            raise ValidationError(f"input file not found: {rel}")
        self.inputs[rel] = sha256_file(p)
        return p

    def output(self, rel: str) -> Path:
        p = self.path(rel)
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs[rel] = ""
        return p

    def finish(self, manifest_rel: str) -> None:
        for rel in self.outputs:
            self.outputs[rel] = sha256_file(self.path(rel))
        config = {k: v for k, v in vars(self.args).items() if k not in {"func", "workdir"}}
        manifest = {
            "command": self.argv,
            "config": config,
            "seeds": self.seeds,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
            "versions": {"kgret": kgret.__version__, "python": platform.python_version(),
                         "numpy": np.__version__},
        }
        mpath = self.path(manifest_rel)
        mpath.parent.mkdir(parents=True, exist_ok=True)
        mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
        timing = {"wall_clock_seconds": time.perf_counter() - self.start}
        mpath.with_suffix(".timing.json").write_text(json.dumps(timing) + "\n", encoding="utf-8")


def _manifest_for(rel: str) -> str:
    return rel + ".manifest.json"


def verify_manifest(path: str | Path, workdir: str | Path = ".") -> list[str]:
    """Files whose current hash differs from the manifest record."""
    manifest = json.loads(Path(path).read_text(encoding="utf-8"))
    bad = []
    for rel, digest in {**manifest["inputs"], **manifest["outputs"]}.items():
        p = Path(workdir) / rel
        if not p.exists() or sha256_file(p) != digest:
            bad.append(rel)
    return bad


# -- subcommands -------------------------------------------------------------------

def cmd_synth(run: Run) -> None:
    a = run.args
    spec = SynthSpec(
        n_concepts=a.n_concepts, synonyms_per_concept=(a.d_min, a.d_max), edge_density=a.edge_density,
        tree_branching=a.tree_branching,
        surface_noise=NoiseRates(a.acronym_rate, a.reorder_rate, a.typo_rate), seed=a.seed,
        kind=GraphKind.ICD10_TREE if a.kind == "icd" else GraphKind.LABELED_MULTIGRAPH,
        annotated_fraction=a.annotated_fraction,
    )
    run.seeds["synth"] = a.seed
    out = generate(spec)
    d = a.out_dir.rstrip("/")
    dump_kg(out.kg, run.output(f"{d}/kg.jsonl"))
    write_census(out.census, run.output(f"{d}/census.jsonl"))
    write_mentions(out.test_in_domain, run.output(f"{d}/test.tsv"))
    write_mentions(out.mention_pool, run.output(f"{d}/pool.tsv"))
    write_mentions(out.train_annotations, run.output(f"{d}/annotations.tsv"))
    run.finish(f"{d}/synth.manifest.json")


def cmd_ingest(run: Run) -> None:
    a = run.args
    kg = load_kg(run.input(a.kg), a.format)
    print(f"{len(kg)} nodes, {kg.edge_count()} edges, {len(kg.parent_of)} parent links ({kg.kind.value})")
    if a.out:
        dump_kg(kg, run.output(a.out))
    if a.mentions:
        if not (a.split_out):
            raise UsageError("--mentions requires --split-out")
        mentions = read_mentions(run.input(a.mentions), kg)
        run.seeds["holdout"] = a.seed
        split, keep = make_zeroshot_split(kg, mentions, a.regime, a.holdout_fraction, a.seed)
        write_mentions(split.mentions, run.output(a.split_out))
        if a.holdout_out:
            with open(run.output(a.holdout_out), "w", encoding="utf-8", newline="\n") as fh:
                for cid in sorted(split.held_out_concepts):
                    fh.write(cid + "\n")
    primary = a.out or a.split_out or a.kg
    run.finish(_manifest_for(primary))


def _split_paths(out: str) -> tuple[str, str]:
    stem = out[:-4] if out.endswith(".tsv") else out
    return stem + ".train.tsv", stem + ".dev.tsv"


def _read_exclusions(run: Run, rel: str | None) -> frozenset[str]:
    if not rel:
        return frozenset()
    return frozenset(line.strip() for line in run.input(rel).read_text(encoding="utf-8").splitlines() if line.strip())


def cmd_gen_tasks(run: Run) -> None:
    a = run.args
    run.seeds["split"] = a.seed
    excluded = _read_exclusions(run, a.exclude)

    def keep(p):
        return p.mention_node not in excluded and p.concept_node not in excluded

    kgs = [load_kg(run.input(path), a.format) for path in a.kg]
    if a.task == "comb":
        datasets, everything = [], []
        for kg in kgs:
            for task in default_tasks(kg, a.family):
                pairs = [p for p in generate_task(kg, task, a.symmetric_graph_pairs) if keep(p)]
                everything.extend(pairs)
                datasets.append(split_80_20(pairs, a.seed, task.value))
        ds = make_comb(datasets, a.seed)
        pairs = everything
    elif a.task == Task.SUPERVISED.value:
        if not a.mentions or len(kgs) != 1:
            raise UsageError("--task supervised needs exactly one --kg and --mentions")
        pairs = [p for p in supervised_pairs(kgs[0], read_mentions(run.input(a.mentions), kgs[0])) if keep(p)]
        ds = split_80_20(pairs, a.seed, a.task)
    else:
        pairs = [p for kg in kgs for p in generate_task(kg, a.task, a.symmetric_graph_pairs) if keep(p)]
        ds = split_80_20(pairs, a.seed, a.task)

    write_pairs(pairs, run.output(a.out))
    train_rel, dev_rel = _split_paths(a.out)
    write_pairs(ds.train, run.output(train_rel))
    write_pairs(ds.dev, run.output(dev_rel))
    stats = task_stats(ds)
    stats_rel = (a.out[:-4] if a.out.endswith(".tsv") else a.out) + ".stats.json"
    run.output(stats_rel).write_text(json.dumps(asdict(stats), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"{a.task}: {len(pairs)} pairs -> {stats.train_count} train / {stats.dev_count} dev")
    run.finish(_manifest_for(a.out))


def _load_dataset(run: Run, pairs_rel: str, label: str) -> TaskDataset:
    train_rel, dev_rel = _split_paths(pairs_rel)
    return TaskDataset(read_pairs(run.input(train_rel)), read_pairs(run.input(dev_rel)), label, 0)


def cmd_train(run: Run) -> None:
    a = run.args
    primary = _load_dataset(run, a.pairs, a.task or "primary")
    aux = _load_dataset(run, a.aux_pairs, "auxiliary") if a.aux_pairs else None
    corpus_pairs = primary.train + (aux.train if aux else [])
    corpus = sorted({t for p in corpus_pairs for t in (p.mention_text, p.concept_text)})
    tok = train_tokenizer(corpus, a.vocab_size)
    dims = EncoderDims(tok.vocab_size, a.dim, a.layers, a.heads, a.ffn_dim, a.max_len)
    model = EncoderModel(dims, tokenizer=tok, pooling=a.pooling, normalize=a.normalize, seed=a.model_seed)
    out = a.out_dir.rstrip("/")
    log_rel = f"{out}/train_log.jsonl"
    cfg = TrainConfig(
        batch_size=a.batch_size, lr_peak=a.lr_peak, warmup_ratio=a.warmup_ratio, max_epochs=a.epochs,
        seed=a.seed, unique_concepts_per_batch=not a.no_unique_concepts, aux_weight=a.aux_weight,
        log_path=str(run.output(log_rel)), checkpoint_dir=str(run.path(f"{out}/checkpoints")),
    )
    run.seeds.update({"train": a.seed, "model_init": a.model_seed})
    if aux is None:
        trained, tlog = train(model, primary, cfg)
    else:
        trained, tlog = train_multitask(model, primary, aux, cfg)
    for epoch in range(1, len(tlog.dev_loss) + 1):
        run.output(f"{out}/checkpoints/epoch-{epoch}.kgre")
    tok.save(run.output(f"{out}/model.tok"))
    trained.save(run.output(f"{out}/model.kgre"))
    if tlog.aborted:
        log.warning("training aborted early: %s", tlog.aborted)
    print(f"trained {len(tlog.steps)} steps; best epoch {tlog.best_epoch}; "
          f"final loss {tlog.steps[-1]['loss']:.4f}")
    run.finish(_manifest_for(f"{out}/model.kgre"))


def _load_model(run: Run, rel: str) -> EncoderModel:
    path = run.input(rel)
    tok_rel = str(Path(rel).with_suffix(".tok"))
    return EncoderModel.load(path, Tokenizer.load(run.input(tok_rel)))


def _load_index(path: Path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
    return DenseIndex.load(path) if magic == INDEX_MAGIC else Bm25Index.load(path)


def cmd_index(run: Run) -> None:
    a = run.args
    kg = load_kg(run.input(a.kg), a.format)
    catalog = ConceptCatalog.from_kg(kg, main_desc_only=a.main_desc_only)
    if a.index_cmd == "build-dense":
        if not a.model:
            raise UsageError("build-dense requires --model")
        index = build_dense_index(_load_model(run, a.model), catalog)
    else:
        index = build_bm25_index(catalog)
    index.save(run.output(a.out))
    print(f"indexed {len(catalog)} entries over {len(catalog.concept_ids)} concepts")
    run.finish(_manifest_for(a.out))


def cmd_query(run: Run) -> None:
    a = run.args
    index = _load_index(run.input(a.index))
    mentions = list(a.mention or [])
    if a.mentions:
        mentions += [m.mention_text for m in read_mentions(run.input(a.mentions))]
    if not mentions:
        raise UsageError("give --mention or --mentions")
    model = _load_model(run, a.model) if isinstance(index, DenseIndex) else None
    lines = []
    for text in mentions:
        res = search_dense(index, model, text, a.k) if model else search_bm25(index, text, a.k)
        lines.append(json.dumps({"mention": text, "hits": [[c, s] for c, s in res.hits]}, ensure_ascii=False))
    body = "\n".join(lines) + "\n"
    if a.out:
        run.output(a.out).write_text(body, encoding="utf-8")
        run.finish(_manifest_for(a.out))
    else:
        sys.stdout.write(body)


def cmd_eval(run: Run) -> None:
    a = run.args
    index = _load_index(run.input(a.index))
    if a.system == "dense":
        if not isinstance(index, DenseIndex) or not a.model:
            raise UsageError("--system dense needs a dense index and --model")
        system = DenseSystem(index, _load_model(run, a.model), a.name or "dense")
    else:
        if not isinstance(index, Bm25Index):
            raise UsageError("--system bm25 needs a BM25 index")
        system = index
    kg = load_kg(run.input(a.kg), a.format) if a.kg else None
    mentions = read_mentions(run.input(a.split), kg)
    regime = Regime(a.regime)
    held = _read_exclusions(run, a.holdout) if a.holdout else frozenset()
    split = EvalSplit(a.split_name or Path(a.split).stem, mentions, regime, held)
    catalog = ConceptCatalog.from_kg(kg) if kg else None
    report = evaluate(system, split, catalog, system_name=a.name)
    write_report(report, run.output(a.out))
    print(summary_table([report]), end="")
    run.finish(_manifest_for(a.out))


def cmd_report(run: Run) -> None:
    a = run.args
    reports = [read_report(run.input(p)) for p in a.reports]
    table = summary_table(reports)
    if a.out:
        run.output(a.out).write_text(table, encoding="utf-8")
        run.finish(_manifest_for(a.out))
    sys.stdout.write(table)


# -- parser ------------------------------------------------------------------------

def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = _Parser(prog="kgret", description="Knowledge-graph self-supervised zero-shot entity retrieval.")
    parser.add_argument("--workdir", default=".", help="base directory for every relative path")
    parser.add_argument("--threads", type=int, default=1, help="BLAS threads; 1 gives bitwise reproducibility")
    parser.add_argument("--config", help="flat key=value file; CLI flags take precedence")
    parser.add_argument("-v", "--verbose", action="store_true")
    subs = parser.add_subparsers(dest="command", parser_class=_Parser)
    table: dict[str, argparse.ArgumentParser] = {}

    p = subs.add_parser("synth", help="generate a synthetic ontology and mention sets")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--kind", choices=["graph", "icd"], default="graph")
    p.add_argument("--n-concepts", type=int, default=500)
    p.add_argument("--d-min", type=int, default=2)
    p.add_argument("--d-max", type=int, default=5)
    p.add_argument("--edge-density", type=float, default=0.01)
    p.add_argument("--tree-branching", type=int, default=8)
    p.add_argument("--acronym-rate", type=float, default=0.3)
    p.add_argument("--reorder-rate", type=float, default=0.3)
    p.add_argument("--typo-rate", type=float, default=0.1)
    p.add_argument("--annotated-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    table["synth"] = p

    p = subs.add_parser("ingest", help="validate a KG file; optionally build a zero-shot split")
    p.add_argument("--kg", required=True)
    p.add_argument("--format", choices=["icd10", "graph"])
    p.add_argument("--out", help="write the normalized graph here")
    p.add_argument("--mentions", help="annotated mention file (mention<TAB>gold)")
    p.add_argument("--regime", choices=[r.value for r in Regime], default=Regime.MENTIONS_ONLY.value)
    p.add_argument("--holdout-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-out")
    p.add_argument("--holdout-out", help="write held-out concept ids, one per line")
    p.set_defaults(func=cmd_ingest)
    table["ingest"] = p

    p = subs.add_parser("gen-tasks", help="generate training pairs and their 80:20 split")
    p.add_argument("--task", required=True, choices=[t.value for t in Task] + ["comb"])
    p.add_argument("--kg", required=True, action="append")
    p.add_argument("--format", choices=["icd10", "graph"])
    p.add_argument("--family", choices=["snomed", "umls"], default="snomed",
                   help="task family for multigraph KGs in --task comb")
    p.add_argument("--mentions", help="annotations for --task supervised")
    p.add_argument("--exclude", help="concept ids (one per line) whose pairs are dropped")
    p.add_argument("--symmetric-graph-pairs", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_tasks)
    table["gen-tasks"] = p

    p = subs.add_parser("train", help="train the shared encoder on a pairs dataset")
    p.add_argument("--pairs", required=True, help="gen-tasks --out path; its .train/.dev files are read")
    p.add_argument("--aux-pairs", help="auxiliary dataset; enables summed-loss multitask training")
    p.add_argument("--task", help="label recorded for the primary dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--vocab-size", type=int, default=4096)
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--ffn-dim", type=int, default=512)
    p.add_argument("--max-len", type=int, default=32)
    p.add_argument("--pooling", choices=["mean", "first"], default="mean")
    p.add_argument("--normalize", action="store_true", help="L2-normalize embeddings")
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr-peak", type=float, default=3e-4)
    p.add_argument("--warmup-ratio", type=float, default=0.02)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--aux-weight", type=float, default=1.0)
    p.add_argument("--no-unique-concepts", action="store_true",
                   help="allow repeated concepts within a batch")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model-seed", type=int, default=0)
    p.set_defaults(func=cmd_train)
    table["train"] = p

    p = subs.add_parser("index", help="build a retrieval index over a KG catalog")
    isub = p.add_subparsers(dest="index_cmd", parser_class=_Parser)
    for name in ("build-dense", "build-bm25"):
        q = isub.add_parser(name)
        q.add_argument("--kg", required=True)
        q.add_argument("--format", choices=["icd10", "graph"])
        q.add_argument("--out", required=True)
        q.add_argument("--main-desc-only", action="store_true")
        if name == "build-dense":
            q.add_argument("--model", required=True)
        q.set_defaults(func=cmd_index, model=None)
        table[f"index {name}"] = q
    table["index"] = p

    p = subs.add_parser("query", help="top-k concepts for mentions")
    p.add_argument("--index", required=True)
    p.add_argument("--model", help="required for dense indexes")
    p.add_argument("--k", type=int, default=25)
    p.add_argument("--mention", action="append")
    p.add_argument("--mentions", help="mention file; gold column is ignored")
    p.add_argument("--out")
    p.set_defaults(func=cmd_query)
    table["query"] = p

    p = subs.add_parser("eval", help="R@1 / R@25 of one system on one split")
    p.add_argument("--system", choices=["bm25", "dense"], required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--model")
    p.add_argument("--kg", help="validates golds and checks catalog coverage")
    p.add_argument("--format", choices=["icd10", "graph"])
    p.add_argument("--split", required=True)
    p.add_argument("--split-name")
    p.add_argument("--regime", choices=[r.value for r in Regime], default=Regime.MENTIONS_ONLY.value)
    p.add_argument("--holdout", help="held-out concept ids (mentions-and-concepts regime)")
    p.add_argument("--name", help="system name in the report")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    table["eval"] = p

    p = subs.add_parser("report", help="merge eval reports into one summary table")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    table["report"] = p
    return parser, table


def read_config(path: Path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _apply_config(sub: argparse.ArgumentParser, config: dict[str, str]) -> None:
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in config.items():
        action = known.get(key)
        if action is None:
            raise UsageError(f"config key {key!r} is not an option of this subcommand")
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = value.lower() in {"1", "true", "yes", "on"}
        elif action.type is not None:
            defaults[key] = action.type(value)
        else:
            defaults[key] = value
        action.required = False
    sub.set_defaults(**defaults)


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser, table = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--workdir", default=".")
    pre.add_argument("--config")
    pre.add_argument("--threads")
    known, rest = pre.parse_known_args(argv)
    if known.config:
        config = read_config(Path(known.workdir) / known.config)
        words = [w for w in rest if not w.startswith("-")]
        name = words[0] if words else None
        if name == "index" and len(words) > 1:
            name = f"index {words[1]}"
        if name in table:
            _apply_config(table[name], config)
    args = parser.parse_args(argv)
    if args.command is None or not hasattr(args, "func"):
        parser.print_help(sys.stderr)
        raise UsageError("missing subcommand")
    return args


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"kgret: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = Run(args, argv)
        if args.config:
            run.input(args.config)
        with threadpool_limits(limits=args.threads):
            args.func(run)
    except (ValueError, FileNotFoundError) as exc:
        print(f"kgret: validation error: {exc}", file=sys.stderr)
        return 1
    except (PipelineRuntimeError, KgretError) as exc:
        print(f"kgret: runtime error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure")
        print(f"kgret: runtime error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
