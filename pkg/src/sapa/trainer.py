"""Adam training loop with per-epoch triplet re-mining and early stopping.

Cross-entropy is computed on source-corpus train utterances; anchoring
triplets are mined from the train split of both corpora so positives can
cross corpora. Early stopping monitors unweighted average recall on the
source validation split and training returns the best-validation parameters.

The optimizer is mini-batch SGD with Adam updates (beta1 0.9, beta2 0.999,
eps 1e-8) and decoupled weight decay.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import evalkit
from .embstore import group_utterances
from .errors import InsufficientDataError, NumericError
from .model import ModelConfig, ModelParams, build_batch, init_params, loss_and_grads
from .triplets import MiningConfig, mine_phoneme_triplets, mine_speaker_triplets

MODES = ("SAPA", "Only-S", "Only-P", "SAPA-Only-S", "SAPA-Only-P")

# mode -> (classifier input, phoneme anchoring, speaker anchoring)
_MODE_SETTINGS = {
    "SAPA": ("fused", True, True),
    "Only-S": ("speaker_only", False, False),
    "Only-P": ("content_only", False, False),
    "SAPA-Only-S": ("fused", False, True),
    "SAPA-Only-P": ("fused", True, False),
}


def mode_settings(mode: str):
    if mode not in _MODE_SETTINGS:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    return _MODE_SETTINGS[mode]


@dataclass
class TrainConfig:
    model: ModelConfig
    learning_rate: float = 1e-4
    weight_decay: float = 1e-3
    max_epochs: int = 70
    batch_size: int = 64
    early_stop_patience: int = 7
    seed: int = 0
    mining: MiningConfig = field(default_factory=MiningConfig)
    mode: str = "SAPA"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("rates and sizes must be positive")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be positive")
        mode_settings(self.mode)
        self.mining.validate()


@dataclass
class TrainReport:
    mode: str
    seed: int
    epochs: list[dict]
    best_epoch: int
    stopping_reason: str

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "epochs": self.epochs,
            "best_epoch": self.best_epoch,
            "stopping_reason": self.stopping_reason,
        }


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def mine_for_epoch(mining_records, cfg: TrainConfig, anchor_set, partitions,
                   epoch: int, n_batches: int):
    """Mine this epoch's triplet lists with epoch-derived seeds.

    Returns (phoneme_triplets, speaker_triplets) with the mode's inactive
    spaces left empty. Exposed so audits can reproduce a training epoch's
    exact triplet sample.
    """
    _, use_p, use_s = mode_settings(cfg.mode)
    n = cfg.mining.anchors_per_batch * n_batches
    trips_p, trips_s = [], []
    if use_p and anchor_set is not None:
        mining_cfg = replace(cfg.mining, seed=_derive_seed(cfg.mining.seed, epoch, 1))
        trips_p, _ = mine_phoneme_triplets(mining_records, anchor_set, partitions,
                                           mining_cfg, n_triplets=n)
    if use_s:
        mining_cfg = replace(cfg.mining, seed=_derive_seed(cfg.mining.seed, epoch, 2))
        trips_s, _ = mine_speaker_triplets(mining_records, partitions,
                                           mining_cfg, n_triplets=n)
    return trips_p, trips_s


class _Adam:
    def __init__(self, cfg: TrainConfig, params: ModelParams):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.t = 0

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.adam_beta1 ** self.t
        bc2 = 1.0 - c.adam_beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = c.adam_beta1 * self.m[k] + (1.0 - c.adam_beta1) * g
            self.v[k] = c.adam_beta2 * self.v[k] + (1.0 - c.adam_beta2) * g * g
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            arr = params.arrays[k]
            arr -= c.learning_rate * (m_hat / (np.sqrt(v_hat) + c.adam_eps))
            arr -= c.learning_rate * c.weight_decay * arr


def train(records, cfg: TrainConfig, anchor_set, partitions,
          src_corpus: str = "src", tgt_corpus: str = "tgt"):
    """Train one model; returns (best ModelParams, TrainReport).

    ``records`` holds both corpora; target records feed only triplet mining,
    never the classification loss or validation metric.
    """
    cfg.validate()
    input_mode, _, _ = mode_settings(cfg.mode)
    model_cfg = replace(cfg.model, input_mode=input_mode)

    train_utts = list(group_utterances(records, split="train", corpus=src_corpus).values())
    val_utts = list(group_utterances(records, split="validation", corpus=src_corpus).values())
    if not train_utts:
        raise InsufficientDataError("source training split is empty")
    if not val_utts:
        raise InsufficientDataError("source validation split is empty")
    mining_records = [r for r in records if r.split == "train"]
    records_by_id = {r.record_id: r for r in mining_records}

    params = init_params(model_cfg, cfg.seed)
    adam = _Adam(cfg, params)
    n_batches = (len(train_utts) + cfg.batch_size - 1) // cfg.batch_size

    epochs: list[dict] = []
    best_uar = -1.0
    best_epoch = 0
    best_params = params.copy()
    since_improve = 0
    stopping_reason = "max_epochs"

    for epoch in range(1, cfg.max_epochs + 1):
        order = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, epoch, 11])
        ).permutation(len(train_utts))

        trips_p, trips_s = mine_for_epoch(mining_records, cfg, anchor_set,
                                          partitions, epoch, n_batches)

        sums = {"L_SER": 0.0, "L_p": 0.0, "L_s": 0.0, "total": 0.0}
        diverged = False
        for b in range(n_batches):
            idxs = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            per = cfg.mining.anchors_per_batch
            batch = build_batch(
                [train_utts[i] for i in idxs],
                trips_p[b * per:(b + 1) * per],
                trips_s[b * per:(b + 1) * per],
                records_by_id, model_cfg.d_c, model_cfg.d_s,
            )
            try:
                comps, grads = loss_and_grads(params, batch)
            except NumericError:
                diverged = True
                break
            for k in sums:
                sums[k] += comps[k]
            adam.step(params, grads.arrays)

        if diverged:
            stopping_reason = "diverged"
            break
        val_uar = evalkit.predict_uar(params, val_utts)
        entry = {"epoch": epoch, "val_uar": val_uar}
        entry.update({k: sums[k] / n_batches for k in sums})
        epochs.append(entry)
        if val_uar > best_uar:
            best_uar = val_uar
            best_epoch = epoch
            best_params = params.copy()
            since_improve = 0
        else:
            since_improve += 1
            if since_improve >= cfg.early_stop_patience:
                stopping_reason = "early_stop"
                break

    report = TrainReport(mode=cfg.mode, seed=cfg.seed, epochs=epochs,
                         best_epoch=best_epoch, stopping_reason=stopping_reason)
    return best_params, report


@dataclass
class RunResult:
    mode: str
    seed: int
    params: ModelParams | None
    report: TrainReport | None
    error: str | None = None


def run_mode_suite(records, cfg_base: TrainConfig, seeds, anchor_set, partitions,
                   src_corpus: str = "src", tgt_corpus: str = "tgt",
                   modes=MODES):
    """Train every mode for every seed with identical splits and mining seeds.

    Per-run failures are recorded in the result and do not stop the suite.
    """
    if not seeds:
        raise ValueError("at least one seed required")
    results: dict[str, list[RunResult]] = {m: [] for m in modes}
    for seed in seeds:
        for mode in modes:
            cfg = replace(cfg_base, mode=mode, seed=seed)
            try:
                params, report = train(records, cfg, anchor_set, partitions,
                                       src_corpus=src_corpus, tgt_corpus=tgt_corpus)
                results[mode].append(RunResult(mode, seed, params, report))
            except Exception as exc:  # noqa: BLE001 - suite must survive bad runs
                results[mode].append(RunResult(mode, seed, None, None, error=str(exc)))
    return results
