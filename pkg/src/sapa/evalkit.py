"""Evaluation: UAR, cross-corpus protocol, and speaker-group transferability.

UAR is the unweighted mean of per-class recalls, robust to class imbalance.
The transferability analysis compares emotion-specific speaker groupings
against an emotion-agnostic grouping and random equal-sized speaker groups.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .embstore import EMOTIONS, EMOTION_INDEX, group_utterances
from .errors import DomainError
from .model import build_batch, forward

log = logging.getLogger(__name__)

_PREDICT_CHUNK = 256


@dataclass
class ConfusionMatrix:
    """4x4 counts; rows are true emotions, columns predicted."""

    counts: np.ndarray

    @classmethod
    def empty(cls) -> "ConfusionMatrix":
        return cls(np.zeros((len(EMOTIONS), len(EMOTIONS)), dtype=np.int64))

    @classmethod
    def from_pairs(cls, y_true, y_pred) -> "ConfusionMatrix":
        cm = cls.empty()
        for t, p in zip(y_true, y_pred):
            cm.counts[t, p] += 1
        return cm

    def total(self) -> int:
        return int(self.counts.sum())

    def to_json_dict(self) -> dict:
        return {
            "labels": list(EMOTIONS),
            "counts": [[int(x) for x in row] for row in self.counts],
        }


def uar(cm: ConfusionMatrix) -> float:
    """Mean per-class recall; classes with zero support are excluded with a warning."""
    support = cm.counts.sum(axis=1)
    if not np.any(support > 0):
        raise DomainError("UAR undefined: no class has support")
    recalls = []
    for i, emotion in enumerate(EMOTIONS):
        if support[i] == 0:
            log.warning("UAR: class %s has zero support, excluded", emotion)
            continue
        recalls.append(cm.counts[i, i] / support[i])
    return float(np.mean(recalls))


def predict(params, utterances):
    """Argmax predictions for a list of utterance groups.

    Returns (y_true, y_pred, skipped) where skipped counts utterances that
    lack the embeddings the model's input mode requires.
    """
    cfg = params.config
    need_content = cfg.input_mode != "speaker_only"
    need_speaker = cfg.input_mode != "content_only"
    usable = []
    skipped = 0
    for utt in utterances:
        if need_content and not utt["content"]:
            skipped += 1
            continue
        if need_speaker and utt["speaker"] is None:
            skipped += 1
            continue
        usable.append(utt)
    y_true = np.array([EMOTION_INDEX[u["emotion"]] for u in usable], dtype=np.int64)
    y_pred = np.zeros(len(usable), dtype=np.int64)
    for start in range(0, len(usable), _PREDICT_CHUNK):
        chunk = usable[start:start + _PREDICT_CHUNK]
        batch = build_batch(chunk, [], [], {}, cfg.d_c, cfg.d_s)
        logits, _ = forward(params, batch)
        y_pred[start:start + len(chunk)] = np.argmax(logits, axis=1)
    return y_true, y_pred, skipped


def predict_uar(params, utterances) -> float:
    y_true, y_pred, _ = predict(params, utterances)
    return uar(ConfusionMatrix.from_pairs(y_true, y_pred))


@dataclass
class EvalResult:
    confusion: ConfusionMatrix
    uar: float
    skipped: int

    def to_json_dict(self) -> dict:
        return {
            "uar": self.uar,
            "skipped": self.skipped,
            "confusion": self.confusion.to_json_dict(),
        }


def evaluate_cross(params, records, corpus: str = "tgt", split: str = "test") -> EvalResult:
    """Evaluate a trained model on another corpus's test utterances."""
    utts = list(group_utterances(records, split=split, corpus=corpus).values())
    if not utts:
        raise DomainError(f"no {split} utterances for corpus {corpus!r}")
    y_true, y_pred, skipped = predict(params, utts)
    cm = ConfusionMatrix.from_pairs(y_true, y_pred)
    return EvalResult(confusion=cm, uar=uar(cm), skipped=skipped)


# ---------------------------------------------------------------------------
# Speaker-group transferability
# ---------------------------------------------------------------------------

@dataclass
class GroupAccuracyReport:
    """Accuracy aggregated over speaker groups for one grouping strategy.

    ``per_emotion`` maps emotion to {"macro", "micro", "groups"} where macro
    averages per-group accuracies, micro pools all group members, and groups
    lists per-group sample counts. For the random strategy the values are
    means over ``n_random_seeds`` independent draws.
    """

    grouping: str
    per_emotion: dict[str, dict]
    n_random_seeds: int = 0
    notices: list[str] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "grouping": self.grouping,
            "per_emotion": self.per_emotion,
            "n_random_seeds": self.n_random_seeds,
            "notices": self.notices,
        }


def _grouped_accuracy(rows, speaker_groups, notices, tag):
    """Macro/micro accuracy of prediction rows over speaker groups."""
    group_stats = []
    used = 0
    correct_total = 0
    for group_id, speakers in speaker_groups:
        members = [r for r in rows if r["speaker_id"] in speakers]
        if not members:
            notices.append(f"{tag}: group {group_id} has no test utterances")
            continue
        n_correct = sum(r["correct"] for r in members)
        group_stats.append({"group": group_id, "n": len(members),
                            "accuracy": n_correct / len(members)})
        used += len(members)
        correct_total += n_correct
    if not group_stats:
        return None
    return {
        "macro": float(np.mean([g["accuracy"] for g in group_stats])),
        "micro": correct_total / used,
        "groups": group_stats,
    }


def _partition_speaker_groups(partition, corpus):
    groups: dict[int, set] = {}
    for (speaker_id, corpus_id), community in partition.assignment.items():
        if corpus_id != corpus:
            continue
        groups.setdefault(community, set()).add(speaker_id)
    return sorted(groups.items())


def group_transferability(params, records, partitions_emotion, partition_global,
                          n_random_seeds: int = 10, corpus: str = "tgt",
                          split: str = "test", random_seed: int = 0):
    """Compare emotion-specific, emotion-agnostic, and random speaker groupings.

    For each emotion the test utterances labeled with it are grouped by the
    speakers' communities and scored; the random baseline redraws equal-sized
    speaker groups ``n_random_seeds`` times and averages the results.
    Returns a list of three GroupAccuracyReport objects.
    """
    utts = list(group_utterances(records, split=split, corpus=corpus).values())
    if not utts:
        raise DomainError(f"no {split} utterances for corpus {corpus!r}")
    y_true, y_pred, _ = predict(params, utts)
    usable = [u for u in utts
              if (params.config.input_mode == "speaker_only" or u["content"])
              and (params.config.input_mode == "content_only" or u["speaker"] is not None)]
    rows = [
        {"speaker_id": u["speaker_id"], "emotion": u["emotion"],
         "correct": bool(t == p)}
        for u, t, p in zip(usable, y_true, y_pred)
    ]

    with_emo = GroupAccuracyReport("with_emotion", {})
    without_emo = GroupAccuracyReport("without_emotion", {})
    rand = GroupAccuracyReport("random", {}, n_random_seeds=n_random_seeds)

    rng = np.random.default_rng(random_seed)
    for emotion in EMOTIONS:
        emo_rows = [r for r in rows if r["emotion"] == emotion]
        if not emo_rows:
            for rep in (with_emo, without_emo, rand):
                rep.notices.append(f"{emotion}: no test utterances")
            continue

        partition = partitions_emotion.get(emotion)
        n_groups = None
        if partition is not None:
            groups = _partition_speaker_groups(partition, corpus)
            stats = _grouped_accuracy(emo_rows, groups, with_emo.notices, emotion)
            if stats:
                with_emo.per_emotion[emotion] = stats
                n_groups = len(stats["groups"])
        else:
            with_emo.notices.append(f"{emotion}: no partition available")

        if partition_global is not None:
            groups = _partition_speaker_groups(partition_global, corpus)
            stats = _grouped_accuracy(emo_rows, groups, without_emo.notices, emotion)
            if stats:
                without_emo.per_emotion[emotion] = stats
        else:
            without_emo.notices.append(f"{emotion}: no global partition available")

        # random baseline: equal-sized groups over the speakers that actually
        # have test utterances for this emotion
        speakers = sorted({r["speaker_id"] for r in emo_rows})
        k = n_groups or min(len(speakers), 2)
        if k < 1:
            rand.notices.append(f"{emotion}: no speakers to group")
            continue
        macros, micros = [], []
        for _ in range(n_random_seeds):
            order = rng.permutation(len(speakers))
            folds = [set() for _ in range(k)]
            for pos, idx in enumerate(order):
                folds[pos % k].add(speakers[idx])
            draw_groups = list(enumerate(folds))
            stats = _grouped_accuracy(emo_rows, draw_groups, [], emotion)
            if stats:
                macros.append(stats["macro"])
                micros.append(stats["micro"])
        if macros:
            rand.per_emotion[emotion] = {
                "macro": float(np.mean(macros)),
                "micro": float(np.mean(micros)),
                "groups": [{"group": "mean-of-draws", "n": len(emo_rows),
                            "accuracy": float(np.mean(macros))}],
            }
    return [with_emo, without_emo, rand]


# ---------------------------------------------------------------------------
# Significance and report tables
# ---------------------------------------------------------------------------

def permutation_test(a, b, n_resamples: int = 10000, seed: int = 0) -> float:
    """Two-sided paired sign-flip permutation test on per-seed metric pairs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.size == 0:
        raise DomainError("paired samples of equal nonzero length required")
    diffs = a - b
    observed = abs(diffs.mean())
    n = diffs.size
    if 2 ** n <= n_resamples:
        # exact enumeration of all sign patterns
        count = 0
        total = 2 ** n
        for mask in range(total):
            signs = np.array([1.0 if mask >> i & 1 else -1.0 for i in range(n)])
            if abs((diffs * signs).mean()) >= observed - 1e-15:
                count += 1
        return count / total
    rng = np.random.default_rng(seed)
    signs = rng.choice([-1.0, 1.0], size=(n_resamples, n))
    stats = np.abs((signs * diffs).mean(axis=1))
    return float((np.sum(stats >= observed - 1e-15) + 1) / (n_resamples + 1))


def format_ablation_table(uars_by_mode: dict[str, list[float]],
                          p_values: dict[str, float] | None = None) -> str:
    """Plain-text cross-corpus UAR table over modes, means over seeds."""
    p_values = p_values or {}
    width = max(len(m) for m in uars_by_mode)
    lines = [f"{'mode'.ljust(width)}  mean UAR   runs  significance"]
    order = ["SAPA", "SAPA-Only-P", "SAPA-Only-S", "Only-P", "Only-S"]
    for mode in order:
        if mode not in uars_by_mode:
            continue
        vals = uars_by_mode[mode]
        if not vals:
            lines.append(f"{mode.ljust(width)}  (no successful runs)")
            continue
        mark = ""
        p = p_values.get(mode)
        if p is not None:
            mark = "**" if p < 0.05 else ("*" if p < 0.1 else "")
        lines.append(
            f"{mode.ljust(width)}  {100 * float(np.mean(vals)):7.2f}   "
            f"{len(vals):4d}  {mark}"
        )
    return "\n".join(lines) + "\n"


def format_transfer_table(reports) -> str:
    """Plain-text per-emotion accuracy table across grouping strategies."""
    by_name = {r.grouping: r for r in reports}
    header = f"{'emotion'.ljust(10)}  w/ Emo   w/o Emo  Rand"
    lines = [header]
    for emotion in EMOTIONS:
        cells = []
        for name in ("with_emotion", "without_emotion", "random"):
            rep = by_name.get(name)
            stats = rep.per_emotion.get(emotion) if rep else None
            cells.append(f"{100 * stats['macro']:7.2f}" if stats else "      -")
        lines.append(f"{emotion.ljust(10)}  " + "  ".join(cells))
    return "\n".join(lines) + "\n"
