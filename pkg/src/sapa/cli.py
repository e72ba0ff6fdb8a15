"""Command-line pipeline: synth, graph, anchors, train, eval, ablate, transfer.

Configs are flat ``key = value`` text files with JSON-typed values and dotted
keys for sections. Every artifact embeds the config hash and seed so a rerun
with the same config reproduces identical outputs. Exit codes: 0 success,
2 config error, 3 missing artifact, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .anchors import AnchorSet, SelectionRule, phoneme_similarity, select_anchors
from .embstore import (
    SyntheticSpec,
    generate_synthetic,
    group_utterances,
    merge_datasets,
    read_dataset,
    split_by_corpus,
    write_dataset,
)
from .errors import (
    ConfigError,
    MissingArtifactError,
    NumericError,
    SapaError,
)
from .evalkit import (
    evaluate_cross,
    format_ablation_table,
    format_transfer_table,
    group_transferability,
    permutation_test,
)
from .model import ModelConfig, load_params, save_params
from .simgraph import (
    Partition,
    build_graph,
    cluster_all_emotions,
    export_community_csv,
    export_dot,
    export_edge_list,
    format_node,
    louvain,
)
from .trainer import MODES, TrainConfig, mine_for_epoch, run_mode_suite, train
from .triplets import MiningConfig, dump_triplets


def parse_kv_file(path) -> dict:
    """Parse ``key = value`` lines; values are JSON, falling back to strings."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    out: dict = {}
    for line_no, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{line_no}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


class PipelineConfig:
    """Typed view over the raw key-value config plus CLI overrides."""

    def __init__(self, raw: dict):
        self.raw = dict(raw)
        self.hash = config_hash(self.raw)

    def get(self, key, default=None):
        return self.raw.get(key, default)

    def require(self, key):
        if key not in self.raw:
            raise ConfigError(f"missing config key {key!r}")
        return self.raw[key]

    @property
    def seed(self) -> int:
        return int(self.get("seed", 0))

    @property
    def tau(self) -> float:
        return float(self.get("tau", 0.7))

    @property
    def out_dir(self) -> Path:
        return Path(self.require("output_dir"))

    def provenance(self) -> dict:
        return {"config_hash": self.hash, "seed": self.seed,
                "config": self.raw, "version": __version__}

    def anchor_rule(self) -> SelectionRule:
        rule = SelectionRule(
            kind=self.get("anchor.rule", "top_k"),
            k=int(self.get("anchor.k", 3)),
            theta=float(self.get("anchor.theta", 0.7)),
        )
        rule.validate()
        return rule

    def model_config(self, d_c: int, d_s: int) -> ModelConfig:
        cfg = ModelConfig(
            d_c=d_c,
            d_s=d_s,
            d_model=int(self.get("model.d_model", 16)),
            n_heads=int(self.get("model.n_heads", 2)),
            n_layers=int(self.get("model.n_layers", 1)),
            fc_widths=tuple(self.get("model.fc_widths", (32, 16, 8, 4))),
            alpha=float(self.get("model.alpha", 0.4)),
            beta=float(self.get("model.beta", 0.6)),
            lambda1=float(self.get("model.lambda1", 0.5)),
            lambda2=float(self.get("model.lambda2", 0.5)),
            d_proj=int(self.get("model.d_proj", 16)),
            use_projections=bool(self.get("model.use_projections", True)),
            activation=self.get("model.activation", "tanh"),
            sequence_input=bool(self.get("model.sequence_input", True)),
            positional_encoding=bool(self.get("model.positional_encoding", False)),
        )
        cfg.validate()
        return cfg

    def mining_config(self) -> MiningConfig:
        return MiningConfig(
            anchors_per_batch=int(self.get("mining.anchors_per_batch", 64)),
            cross_corpus_positive=bool(self.get("mining.cross_corpus_positive", True)),
            restrict_to_anchor_set=bool(self.get("mining.restrict_to_anchor_set", True)),
            seed=int(self.get("mining.seed", self.seed)),
        )

    def train_config(self, d_c: int, d_s: int) -> TrainConfig:
        cfg = TrainConfig(
            model=self.model_config(d_c, d_s),
            learning_rate=float(self.get("train.learning_rate", 1e-4)),
            weight_decay=float(self.get("train.weight_decay", 1e-3)),
            max_epochs=int(self.get("train.max_epochs", 70)),
            batch_size=int(self.get("train.batch_size", 64)),
            early_stop_patience=int(self.get("train.patience", 7)),
            seed=self.seed,
            mining=self.mining_config(),
            mode=self.get("train.mode", "SAPA"),
        )
        cfg.validate()
        return cfg

    @property
    def src_corpus(self) -> str:
        return self.get("src_corpus", "src")

    @property
    def tgt_corpus(self) -> str:
        return self.get("tgt_corpus", "tgt")


def _load_config(args) -> PipelineConfig:
    raw = parse_kv_file(args.config)
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    if getattr(args, "tau", None) is not None:
        raw["tau"] = args.tau
    if getattr(args, "mode", None) is not None:
        raw["train.mode"] = args.mode
    return PipelineConfig(raw)


def _write_json(cfg: PipelineConfig, path: Path, payload: dict) -> None:
    obj = {"provenance": cfg.provenance()}
    obj.update(payload)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _write_text(cfg: PipelineConfig, path: Path, body: str, comment: str = "#") -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"{comment} config_hash={cfg.hash} seed={cfg.seed}\n"
    path.write_text(header + body, encoding="utf-8")


def _read_datasets(cfg: PipelineConfig):
    paths = [Path(cfg.require("source")), Path(cfg.require("target"))]
    datasets = []
    for p in paths:
        if not p.exists():
            raise MissingArtifactError(f"dataset file not found: {p}")
        datasets.append(read_dataset(p))
    return merge_datasets(*datasets)


def _partition_to_json(partition: Partition) -> dict:
    return {format_node(node): c for node, c in sorted(partition.assignment.items())}


def _partition_from_json(obj: dict) -> Partition:
    assignment = {}
    for key, c in obj.items():
        corpus, _, speaker = key.partition(":")
        assignment[(speaker, corpus)] = int(c)
    n = max(assignment.values()) + 1 if assignment else 0
    return Partition(assignment, n)


def _load_partitions(cfg: PipelineConfig):
    path = cfg.out_dir / "partitions.json"
    if not path.exists():
        raise MissingArtifactError(f"missing graph artifact: {path} (run 'sapa graph')")
    obj = json.loads(path.read_text(encoding="utf-8"))
    emotions = {e: _partition_from_json(p) for e, p in obj["emotions"].items()}
    global_p = _partition_from_json(obj["global"]) if obj.get("global") else None
    return emotions, global_p


def _load_anchor_set(cfg: PipelineConfig) -> AnchorSet:
    path = cfg.out_dir / "anchors.json"
    if not path.exists():
        raise MissingArtifactError(f"missing anchors artifact: {path} (run 'sapa anchors')")
    return AnchorSet.from_json_dict(json.loads(path.read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _spec_from_file(path) -> SyntheticSpec:
    raw = parse_kv_file(path)
    kwargs = dict(raw)
    for key in ("phoneme_inventory", "corpora", "expressiveness_range"):
        if key in kwargs and isinstance(kwargs[key], list):
            kwargs[key] = tuple(kwargs[key])
    if "anchored_phonemes" in kwargs:
        kwargs["anchored_phonemes"] = {
            e: tuple(v) for e, v in kwargs["anchored_phonemes"].items()
        }
    try:
        spec = SyntheticSpec(**kwargs)
        spec.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid synthetic spec: {exc}") from exc
    return spec


def cmd_synth(args) -> int:
    raw = parse_kv_file(args.spec)
    spec = _spec_from_file(args.spec)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest, records = generate_synthetic(spec)
    manifest.provenance = {"config_hash": config_hash(raw), "seed": spec.seed}
    paths = []
    for m, recs in split_by_corpus(manifest, records):
        path = out_dir / f"dataset_{m.corpora[0]}.jsonl"
        write_dataset(m, recs, path)
        paths.append(path)
    for p in paths:
        print(p)
    return 0


def cmd_graph(args) -> int:
    cfg = _load_config(args)
    manifest, records = _read_datasets(cfg)
    outcome = cluster_all_emotions(records, cfg.tau, cfg.seed)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    if not outcome.results:
        print("graph: no emotion had sufficient data:", file=sys.stderr)
        for notice in outcome.notices:
            print(f"  {notice}", file=sys.stderr)
        return 1
    modularity_payload = {}
    partitions_payload = {}
    for emotion, (graph, partition, report) in sorted(outcome.results.items()):
        _write_text(cfg, out / f"edges_{emotion}.txt", export_edge_list(graph))
        _write_text(cfg, out / f"communities_{emotion}.csv",
                    export_community_csv(partition))
        _write_text(cfg, out / f"graph_{emotion}.dot",
                    export_dot(graph, partition), comment="//")
        modularity_payload[emotion] = {
            "n_communities": report.n_communities,
            "Q": report.Q,
        }
        partitions_payload[emotion] = _partition_to_json(partition)

    global_partition = None
    try:
        global_graph = build_graph(records, None, cfg.tau)
        if global_graph.edges:
            global_partition = louvain(global_graph, cfg.seed + 101)
            _write_text(cfg, out / "edges_global.txt", export_edge_list(global_graph))
            _write_text(cfg, out / "communities_global.csv",
                        export_community_csv(global_partition))
            _write_text(cfg, out / "graph_global.dot",
                        export_dot(global_graph, global_partition), comment="//")
    except SapaError as exc:
        outcome.notices.append(f"global: {exc}")

    _write_json(cfg, out / "modularity.json", {
        "emotions": modularity_payload,
        "notices": sorted(outcome.notices),
    })
    _write_json(cfg, out / "partitions.json", {
        "emotions": partitions_payload,
        "global": _partition_to_json(global_partition) if global_partition else None,
    })
    for notice in outcome.notices:
        print(f"notice: {notice}", file=sys.stderr)
    return 0


def cmd_anchors(args) -> int:
    cfg = _load_config(args)
    manifest, records = _read_datasets(cfg)
    vowels = cfg.get("anchor.vowels_only")
    table = phoneme_similarity(
        records, cfg.src_corpus, cfg.tgt_corpus,
        inventory=manifest.phoneme_inventory,
        vowels_only=tuple(vowels) if vowels else None,
    )
    anchor_set = select_anchors(table, cfg.anchor_rule())
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    _write_text(cfg, out / "similarity.csv", table.to_csv())
    _write_json(cfg, out / "anchors.json", anchor_set.to_json_dict())
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    manifest, records = _read_datasets(cfg)
    partitions, _ = _load_partitions(cfg)
    anchor_set = _load_anchor_set(cfg)
    train_cfg = cfg.train_config(manifest.d_c, manifest.d_s)
    params, report = train(records, train_cfg, anchor_set, partitions,
                           src_corpus=cfg.src_corpus, tgt_corpus=cfg.tgt_corpus)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    save_params(params, out / "checkpoint.npz")
    _write_json(cfg, out / "train_report.json", {"report": report.to_json_dict()})
    if cfg.get("train.dump_triplets"):
        # audit dump: the first training epoch's exact triplet sample
        mining_records = [r for r in records if r.split == "train"]
        n_utts = len(group_utterances(records, split="train", corpus=cfg.src_corpus))
        n_batches = (n_utts + train_cfg.batch_size - 1) // train_cfg.batch_size
        trips_p, trips_s = mine_for_epoch(mining_records, train_cfg, anchor_set,
                                          partitions, 1, n_batches)
        _write_text(cfg, out / "triplets_epoch1.tsv",
                    dump_triplets(trips_p + trips_s))
    best = report.epochs[report.best_epoch - 1] if report.epochs else None
    if best:
        print(f"best epoch {report.best_epoch}: val UAR {best['val_uar']:.4f} "
              f"({report.stopping_reason})")
    return 0


def _require_checkpoint(cfg: PipelineConfig):
    path = cfg.out_dir / "checkpoint.npz"
    if not path.exists():
        raise MissingArtifactError(f"missing checkpoint: {path} (run 'sapa train')")
    return load_params(path)


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    _, records = _read_datasets(cfg)
    params = _require_checkpoint(cfg)
    result = evaluate_cross(params, records, corpus=cfg.tgt_corpus)
    _write_json(cfg, cfg.out_dir / "eval_metrics.json", {"cross": result.to_json_dict()})
    print(f"cross-corpus UAR: {result.uar:.4f} (skipped {result.skipped})")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    manifest, records = _read_datasets(cfg)
    partitions, _ = _load_partitions(cfg)
    anchor_set = _load_anchor_set(cfg)
    seeds = [int(s) for s in cfg.get("ablate.seeds", [cfg.seed])]
    base = cfg.train_config(manifest.d_c, manifest.d_s)
    suite = run_mode_suite(records, base, seeds, anchor_set, partitions,
                           src_corpus=cfg.src_corpus, tgt_corpus=cfg.tgt_corpus)
    uars: dict[str, list[float]] = {}
    failures: dict[str, list[str]] = {}
    for mode, runs in suite.items():
        for run in runs:
            if run.error is not None:
                failures.setdefault(mode, []).append(run.error)
                continue
            result = evaluate_cross(run.params, records, corpus=cfg.tgt_corpus)
            uars.setdefault(mode, []).append(result.uar)
    p_values = {}
    sapa = uars.get("SAPA", [])
    for mode, vals in uars.items():
        if mode != "SAPA" and len(vals) == len(sapa) and len(sapa) > 1:
            p_values[mode] = permutation_test(sapa, vals)
    payload = {
        "seeds": seeds,
        "uar": {m: v for m, v in sorted(uars.items())},
        "mean_uar": {m: float(np.mean(v)) for m, v in sorted(uars.items()) if v},
        "p_vs_sapa": p_values,
        "failures": failures,
    }
    _write_json(cfg, cfg.out_dir / "ablation.json", payload)
    table = format_ablation_table(uars, p_values)
    _write_text(cfg, cfg.out_dir / "ablation.txt", table)
    print(table, end="")
    return 0


def cmd_transfer(args) -> int:
    cfg = _load_config(args)
    _, records = _read_datasets(cfg)
    params = _require_checkpoint(cfg)
    partitions, global_partition = _load_partitions(cfg)
    reports = group_transferability(
        params, records, partitions, global_partition,
        n_random_seeds=int(cfg.get("transfer.n_random_seeds", 10)),
        corpus=cfg.tgt_corpus, random_seed=cfg.seed,
    )
    _write_json(cfg, cfg.out_dir / "transfer_metrics.json", {
        "groupings": [r.to_json_dict() for r in reports],
    })
    table = format_transfer_table(reports)
    _write_text(cfg, cfg.out_dir / "transfer.txt", table)
    print(table, end="")
    return 0


def cmd_all(args) -> int:
    if getattr(args, "spec", None):
        synth_args = argparse.Namespace(spec=args.spec, out=args.synth_out)
        rc = cmd_synth(synth_args)
        if rc:
            return rc
    for step in (cmd_graph, cmd_anchors, cmd_train, cmd_eval, cmd_transfer):
        rc = step(args)
        if rc:
            return rc
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sapa",
        description="Speaker-style aware phoneme anchoring pipeline",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic two-corpus dataset")
    p.add_argument("spec", help="synthetic spec key=value file")
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(func=cmd_synth)

    def common(p):
        p.add_argument("config", help="pipeline config key=value file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--tau", type=float, default=None)
        p.add_argument("--mode", choices=MODES, default=None)

    for name, fn, help_text in (
        ("graph", cmd_graph, "build per-emotion speaker graphs and communities"),
        ("anchors", cmd_anchors, "compute phoneme similarity and anchor sets"),
        ("train", cmd_train, "train the fused classifier"),
        ("eval", cmd_eval, "evaluate cross-corpus UAR"),
        ("ablate", cmd_ablate, "train and evaluate all ablation modes"),
        ("transfer", cmd_transfer, "speaker-group transferability analysis"),
    ):
        p = sub.add_parser(name, help=help_text)
        common(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("all", help="run graph, anchors, train, eval, transfer")
    common(p)
    p.add_argument("--spec", default=None, help="optional synth spec to run first")
    p.add_argument("--synth-out", default=".", help="directory for synth output")
    p.set_defaults(func=cmd_all)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except SapaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
