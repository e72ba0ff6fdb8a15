"""Speaker-style aware phoneme anchoring (SAPA) for cross-lingual SER.

The pipeline builds per-emotion speaker similarity graphs with Louvain
communities, selects cross-corpus phoneme anchors, mines dual-space triplets,
and trains a fused attention classifier with combined cross-entropy and
triplet objectives. Everything is deterministic given seeds and verifiable
on synthetic corpora with planted structure.
"""

__version__ = "0.1.0"

from .anchors import AnchorSet, PhonemeSimilarityTable, SelectionRule, phoneme_similarity, select_anchors
from .embstore import (
    EMOTIONS,
    DatasetManifest,
    EmbeddingRecord,
    SyntheticSpec,
    generate_synthetic,
    group_utterances,
    merge_datasets,
    planted_structure,
    read_dataset,
    write_dataset,
)
from .evalkit import ConfusionMatrix, EvalResult, evaluate_cross, group_transferability, uar
from .model import (
    Batch,
    ModelConfig,
    ModelParams,
    backward,
    build_batch,
    forward,
    fuse,
    fuse_sequence,
    init_params,
    load_params,
    loss_total,
    save_params,
    triplet_loss,
)
from .simgraph import (
    ModularityReport,
    Partition,
    SpeakerGraph,
    build_graph,
    cluster_all_emotions,
    cosine,
    louvain,
    modularity,
)
from .trainer import MODES, TrainConfig, TrainReport, run_mode_suite, train
from .triplets import (
    MiningConfig,
    Triplet,
    mine_phoneme_triplets,
    mine_speaker_triplets,
    validate_triplets,
)

__all__ = [
    "EMOTIONS",
    "AnchorSet",
    "Batch",
    "ConfusionMatrix",
    "DatasetManifest",
    "EmbeddingRecord",
    "EvalResult",
    "MiningConfig",
    "ModelConfig",
    "ModelParams",
    "ModularityReport",
    "MODES",
    "Partition",
    "PhonemeSimilarityTable",
    "SelectionRule",
    "SpeakerGraph",
    "SyntheticSpec",
    "TrainConfig",
    "TrainReport",
    "Triplet",
    "backward",
    "build_batch",
    "build_graph",
    "cluster_all_emotions",
    "cosine",
    "evaluate_cross",
    "forward",
    "fuse",
    "fuse_sequence",
    "generate_synthetic",
    "group_transferability",
    "group_utterances",
    "init_params",
    "load_params",
    "loss_total",
    "louvain",
    "merge_datasets",
    "mine_phoneme_triplets",
    "mine_speaker_triplets",
    "modularity",
    "phoneme_similarity",
    "planted_structure",
    "read_dataset",
    "run_mode_suite",
    "save_params",
    "select_anchors",
    "train",
    "triplet_loss",
    "uar",
    "validate_triplets",
    "write_dataset",
]
