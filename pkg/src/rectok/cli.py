"""Command-line front end orchestrating the full pipeline.

Subcommands mirror the pipeline stages and are resumable from the
artifacts of earlier stages::

    rectok init    --config run.cfg      # identifier initialization
    rectok train   --config run.cfg      # warm-up recommendation training
    rectok refine  --config run.cfg      # refinement iterations
    rectok infer   --config run.cfg      # trie-constrained decoding
    rectok eval    --config run.cfg      # metric report
    rectok report  runA/metrics.txt runB/metrics.txt

Every artifact is stamped with the config hash; later stages refuse
inputs produced under a different configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .cid import build_cooccurrence, dump_tree, hierarchical_tokenize
from .config import RunConfig, build_config
from .corpus import (
    Catalog,
    InteractionSequence,
    leave_one_out_split,
    load_interactions,
    save_dataset,
    synthesize_dataset,
)
from .decode import TrieIndex, constrained_beam_search
from .embed import CfEmbedder, embed_catalog
from .identifiers import IdentifierMap
from .metrics import MetricReport, compute_report, render_comparison
from .prompts import PromptBuilder
from .refine import RefineConfig, collision_avoidance, refine_iterations, train_recommender
from .rqvae import RqvaeConfig, train_rqvae
from .seeding import derive_seed
from .seqmodel import ModelConfig, SequenceModel, load_checkpoint, save_checkpoint
from .vocab import build_vocabulary

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A pipeline stage cannot run; the message is the diagnostic."""


def _out(config: RunConfig) -> Path:
    return Path(config.out_dir)


def _map_path(config: RunConfig, version: int) -> Path:
    return _out(config) / f"identifiers_v{version}.tsv"


def _model_path(config: RunConfig, version: int) -> Path:
    return _out(config) / f"model_v{version}.pt"


def _load_dataset(config: RunConfig) -> tuple[Catalog, list[InteractionSequence]]:
    if config.dataset == "synthetic":
        data = synthesize_dataset(
            derive_seed(config.seed, "dataset"),
            n_users=config.n_users,
            n_items=config.n_items,
            n_clusters=config.n_clusters,
            seq_len_range=(config.seq_len_min, config.seq_len_max),
        )
        return data.catalog, data.sequences
    return load_interactions(config.dataset)


def _check_hash(config: RunConfig, stored: str | None, source: str) -> None:
    if stored != config.config_hash():
        raise StageError(
            f"{source} was produced under config {stored!r}, "
            f"current config is {config.config_hash()!r}"
        )


def _load_map(config: RunConfig, version: int) -> IdentifierMap:
    path = _map_path(config, version)
    if not path.exists():
        raise StageError(f"missing identifier map {path}; run earlier stages first")
    id_map, stored = IdentifierMap.load(path)
    _check_hash(config, stored, str(path))
    return id_map


def _load_model(config: RunConfig, version: int) -> SequenceModel:
    path = _model_path(config, version)
    if not path.exists():
        raise StageError(f"missing checkpoint {path}; run earlier stages first")
    model, extra = load_checkpoint(path)
    _check_hash(config, extra.get("config_hash"), str(path))
    return model


def _refine_config(config: RunConfig) -> RefineConfig:
    return RefineConfig(
        iterations=config.iterations,
        warmup_epochs=config.warmup_epochs,
        iter_epochs=config.iter_epochs,
        align_epochs=config.align_epochs,
        candidates_k=config.beam_k,
        beam_width=config.beam_width,
        candidate_order=config.candidate_order,
        align_mix=config.align_mix,
        lr=config.train_lr,
        batch_size=config.train_batch,
        seed=config.seed,
    )


def cmd_init(config: RunConfig) -> None:
    out = _out(config)
    out.mkdir(parents=True, exist_ok=True)
    catalog, sequences = _load_dataset(config)
    if config.dataset == "synthetic":
        save_dataset(catalog, sequences, out / "dataset")

    if config.initializer == "cid":
        order = catalog.item_order()
        matrix = build_cooccurrence(sequences, order)
        tree, id_map = hierarchical_tokenize(
            matrix,
            order,
            threshold=config.cid_threshold,
            branching=config.cid_branching,
            seed=derive_seed(config.seed, "cid"),
            depth_cap=config.cid_depth_cap,
        )
        (out / "cluster_tree.txt").write_text(dump_tree(tree) + "\n", encoding="utf-8")
    else:
        embeddings = embed_catalog(catalog, config.embed_dim, derive_seed(config.seed, "embed"))
        letter = config.initializer == "rqvae+letter"
        rq_config = RqvaeConfig(
            levels=config.rq_levels,
            codebook_size=config.rq_codebook,
            input_dim=config.embed_dim,
            latent_dim=config.rq_latent,
            hidden_dim=config.rq_hidden,
            epochs=config.rq_epochs,
            batch_size=config.rq_batch,
            lr=config.rq_lr,
            seed=derive_seed(config.seed, "rqvae"),
            cf_weight=config.rq_cf_weight if letter else 0.0,
            div_weight=config.rq_div_weight if letter else 0.0,
            div_clusters=config.rq_div_clusters,
            temperature=config.rq_temperature,
        )
        cf_embeddings = None
        if letter:
            order = catalog.item_order()
            matrix = build_cooccurrence(sequences, order)
            embedder = CfEmbedder(
                len(order), dim=config.rq_latent, seed=derive_seed(config.seed, "cf")
            )
            cf_embeddings = {
                item_id: embedder.embed(item_id, matrix[row])
                for row, item_id in enumerate(order)
            }
        result = train_rqvae(embeddings, rq_config, cf_embeddings)
        id_map = result.id_map
        if not id_map.is_injective():
            n_groups = len(id_map.colliding_groups())
            log.info("initializer produced %d colliding groups; disambiguating", n_groups)
            id_map = collision_avoidance(id_map)
        (out / "rqvae_history.json").write_text(
            json.dumps(result.history, indent=2) + "\n", encoding="utf-8"
        )

    id_map.save(_map_path(config, 0), config.config_hash())
    print(f"wrote {_map_path(config, 0)} ({len(id_map)} items, source {id_map.source})")


def cmd_train(config: RunConfig) -> None:
    catalog, sequences = _load_dataset(config)
    split = leave_one_out_split(sequences)
    id_map = _load_map(config, 0)
    words = {w for item in catalog.items.values() for w in item.text_feature}
    vocab = build_vocabulary(words, id_map.token_set())
    model = SequenceModel(
        vocab,
        ModelConfig(
            dim=config.model_dim,
            layers=config.model_layers,
            heads=config.model_heads,
            context=config.model_context,
            seed=derive_seed(config.seed, "model"),
        ),
    )
    losses = train_recommender(
        model,
        split.train,
        id_map,
        config.warmup_epochs,
        lr=config.train_lr,
        batch_size=config.train_batch,
        seed=config.seed,
    )
    save_checkpoint(model, _model_path(config, 0), config_hash=config.config_hash(), version=0)
    final = f"{losses[-1]:.4f}" if losses else "n/a"
    print(f"wrote {_model_path(config, 0)} (warm-up loss {final})")


def cmd_refine(config: RunConfig) -> None:
    catalog, sequences = _load_dataset(config)
    split = leave_one_out_split(sequences)
    model = _load_model(config, 0)
    id_map = _load_map(config, 0)

    def checkpoint(iteration, model_state, map_state, report) -> None:
        map_state.save(_map_path(config, iteration), config.config_hash())
        save_checkpoint(
            model_state,
            _model_path(config, iteration),
            config_hash=config.config_hash(),
            version=iteration,
        )
        if report is not None:
            report.save(_out(config) / f"refine_report_v{iteration}.json")

    final_map, reports = refine_iterations(
        model, id_map, catalog, split, _refine_config(config), checkpoint=checkpoint
    )
    for report in reports:
        print(
            f"iteration {report.iteration}: adjustment_ratio="
            f"{report.adjustment_ratio:.4f} unresolved={len(report.unresolved)} "
            f"collisions={report.post_ca_collisions}"
        )
    print(f"wrote {_map_path(config, config.iterations)} ({len(final_map)} items)")


def cmd_infer(config: RunConfig) -> None:
    _, sequences = _load_dataset(config)
    split = leave_one_out_split(sequences)
    version = config.iterations
    model = _load_model(config, version)
    id_map = _load_map(config, version)
    trie = TrieIndex.from_identifier_map(id_map, model.vocab)
    builder = PromptBuilder(model.vocab)
    rng = np.random.default_rng(derive_seed(config.seed, "infer"))
    lines = [
        "# predictions v1",
        f"# config: {config.config_hash()}",
        f"# map_version: {version}",
    ]
    for case in split.test:
        history = [id_map[item_id] for item_id in case.history]
        pair = builder.rec_prompt(history, rng=rng)
        ranked = constrained_beam_search(model, pair.instruction, trie, config.infer_width)
        for rank, (item_id, ppl) in enumerate(ranked, 1):
            lines.append(f"{case.user_id}\t{rank}\t{item_id}\t{format(ppl, '.12g')}")
    path = _out(config) / "predictions.tsv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {path} ({len(split.test)} test cases)")


def _load_predictions(config: RunConfig) -> dict[int, list[int]]:
    path = _out(config) / "predictions.tsv"
    if not path.exists():
        raise StageError(f"missing predictions {path}; run infer first")
    ranked: dict[int, list[int]] = {}
    stored_hash: str | None = None
    for raw in path.read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("config:"):
                stored_hash = body.split(":", 1)[1].strip()
            continue
        user_field, _, item_field, _ = line.split("\t")
        ranked.setdefault(int(user_field), []).append(int(item_field))
    _check_hash(config, stored_hash, str(path))
    return ranked


def cmd_eval(config: RunConfig) -> None:
    catalog, sequences = _load_dataset(config)
    split = leave_one_out_split(sequences)
    version = config.iterations
    id_map = _load_map(config, version)
    ranked = _load_predictions(config)
    predictions = [ranked.get(case.user_id, []) for case in split.test]
    truths = [case.target for case in split.test]
    embeddings = embed_catalog(catalog, config.embed_dim, derive_seed(config.seed, "embed"))
    previous = None
    if version > 0:
        previous = _load_map(config, version - 1)
    report = compute_report(
        predictions,
        truths,
        catalog.item_order(),
        id_map,
        embeddings,
        ks=config.ks(),
        stamps={
            "config": config.config_hash(),
            "map_version": str(version),
            "map_source": id_map.source,
            "n_items": str(len(catalog)),
            "n_test_cases": str(len(split.test)),
        },
        previous_map=previous,
    )
    path = _out(config) / "metrics.txt"
    report.save(path)
    print(report.to_text(), end="")
    print(f"wrote {path}")


def cmd_report(paths: list[Path]) -> None:
    reports = {}
    for path in paths:
        name = path.parent.name or str(path)
        reports[name] = MetricReport.load(path)
    print(render_comparison(reports))


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="key = value config file")
    parser.add_argument(
        "--set",
        dest="sets",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None, help="output directory (out_dir)")
    parser.add_argument("--iterations", type=int, default=None)
    parser.add_argument("--initializer", default=None, choices=["cid", "rqvae", "rqvae+letter"])
    parser.add_argument("-v", "--verbose", action="store_true")


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides: dict[str, str] = {}
    for pair in args.sets:
        if "=" not in pair:
            raise StageError(f"--set expects KEY=VALUE, got {pair!r}")
        key, _, value = pair.partition("=")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.iterations is not None:
        overrides["iterations"] = str(args.iterations)
    if args.initializer is not None:
        overrides["initializer"] = args.initializer
    return build_config(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="rectok",
        description="Self-improving item tokenization lab for generative recommendation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    stages = {
        "init": "run the identifier initializer",
        "train": "warm-up recommendation training",
        "refine": "refinement iterations (align, regenerate, retrain)",
        "infer": "trie-constrained beam decoding over the test split",
        "eval": "compute the metric report",
    }
    for name, help_text in stages.items():
        _add_common(sub.add_parser(name, help=help_text))
    report_parser = sub.add_parser("report", help="compare metric reports")
    report_parser.add_argument("metrics", nargs="+", type=Path)
    report_parser.add_argument("-v", "--verbose", action="store_true")

    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    torch.set_num_threads(1)  # keep runs bitwise reproducible
    try:
        if args.command == "report":
            cmd_report(args.metrics)
            return 0
        config = _config_from_args(args)
        {
            "init": cmd_init,
            "train": cmd_train,
            "refine": cmd_refine,
            "infer": cmd_infer,
            "eval": cmd_eval,
        }[args.command](config)
        return 0
    except Exception as exc:  # single-line diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
