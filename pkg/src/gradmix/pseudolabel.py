"""Ensemble pseudo-labels for the unlabeled target pool.

Hard labels need every member to put its maximum on the same class with
probability above a threshold; soft labels average the members' softmax rows.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor_net as tn
from .datasets import LabeledDataset, UnlabeledDataset

HARD_THRESHOLD = 0.8


def params_digest(params: tn.NetworkParams) -> str:
    h = hashlib.sha256()
    for arr in params.trunk + [params.heads[k] for k in sorted(params.heads)]:
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


@dataclass
class EnsembleSpec:
    members: list[tn.NetworkParams]
    scores: list[float]
    head_id: str
    labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.members:
            raise ValueError("an ensemble needs at least one member")
        if len(self.scores) != len(self.members):
            raise ValueError("one selection score per member")
        if any(a < b for a, b in zip(self.scores, self.scores[1:])):
            raise ValueError("members must be ranked by score, best first")

    @property
    def R(self) -> int:
        return len(self.members)

    def top(self, r: int) -> "EnsembleSpec":
        return EnsembleSpec(self.members[:r], self.scores[:r], self.head_id, self.labels[:r])

    def digest(self) -> str:
        return hashlib.sha256("".join(params_digest(m) for m in self.members).encode()).hexdigest()[:16]


def ensemble_predict(members: Sequence[tn.NetworkParams], images, head_id: str,
                     batch_size: int = 512) -> np.ndarray:
    """Softmax rows from every member: array ``(R, N, n_classes)``."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    n_classes = {m.n_classes(head_id) if head_id in m.heads else None for m in members}
    if None in n_classes or len(n_classes) != 1:
        raise ValueError(f"members disagree on head {head_id!r}")
    out = []
    for m in members:
        rows = [tn.softmax(tn.forward(m, head_id, images[i : i + batch_size]))
                for i in range(0, len(images), batch_size)]
        out.append(np.concatenate(rows) if rows else np.zeros((0, n_classes.pop())))
    return np.stack(out)


def hard_label(rows, threshold: float = HARD_THRESHOLD):
    """Class agreed by every row with probability above ``threshold``, else None."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    arg = rows.argmax(axis=1)
    c = int(arg[0])
    if np.all(arg == c) and np.all(rows[:, c] > threshold):
        return c
    return None


def hard_labels(probs: np.ndarray, threshold: float = HARD_THRESHOLD):
    """Vectorised :func:`hard_label` over ``(R, N, C)``; returns ``(accepted, labels, confidence)``.

    ``confidence`` is the smallest member probability of the agreed class.
    """
    arg = probs.argmax(axis=2)
    lab = arg[0]
    agree = np.all(arg == lab, axis=0)
    p_c = np.take_along_axis(probs, np.broadcast_to(lab, arg.shape)[..., None], axis=2)[..., 0]
    conf = p_c.min(axis=0)
    accepted = agree & np.all(p_c > threshold, axis=0)
    return accepted, lab, conf


def soft_label(rows) -> np.ndarray:
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    return rows.mean(axis=0)


@dataclass
class PseudoLabeledSet:
    mode: str  # "hard" | "soft"
    indices: np.ndarray  # positions in the unlabeled set
    labels: np.ndarray  # class indices (hard) or probability rows (soft)
    confidence: np.ndarray
    threshold_used: float
    provenance: str
    images: np.ndarray = field(repr=False, default=None)

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def loss_kind(self) -> str:
        return "ce" if self.mode == "hard" else "kl"

    def manifest(self) -> dict:
        return {
            "mode": self.mode,
            "threshold": self.threshold_used,
            "provenance": self.provenance,
            "items": [
                {"index": int(i), "label": (int(y) if self.mode == "hard" else [float(v) for v in y]),
                 "confidence": float(c)}
                for i, y, c in zip(self.indices, self.labels, self.confidence)
            ],
        }


def build_pseudo_set(unlabeled: UnlabeledDataset, ensemble: EnsembleSpec, mode: str = "hard",
                     threshold: float = HARD_THRESHOLD, probs: np.ndarray | None = None) -> PseudoLabeledSet:
    if len(unlabeled) == 0:
        raise ValueError("unlabeled set is empty")
    if probs is None:
        probs = ensemble_predict(ensemble.members, unlabeled.images, ensemble.head_id)
    accepted, lab, conf = hard_labels(probs, threshold)
    if mode == "hard":
        idx = np.flatnonzero(accepted)
        labels, conf = lab[idx], conf[idx]
    elif mode == "soft":
        idx = np.arange(len(unlabeled))
        labels = probs.mean(axis=0)
        conf = labels.max(axis=1)
    else:
        raise ValueError(f"unknown pseudo-label mode {mode!r}")
    return PseudoLabeledSet(mode, idx, labels, conf, threshold, ensemble.digest(),
                            unlabeled.images[idx])


def enlarge_validation(val: LabeledDataset, pseudo_hard: PseudoLabeledSet,
                       unlabeled: UnlabeledDataset, per_class: int = 100) -> LabeledDataset:
    """Tops every class of V up to ``per_class`` with the most confident hard labels."""
    if pseudo_hard.mode != "hard":
        raise ValueError("validation can only be enlarged with hard labels")
    add = []
    for c in range(val.domain.n_classes):
        room = per_class - int(np.sum(val.labels == c))
        if room <= 0:
            continue
        cand = np.flatnonzero(pseudo_hard.labels == c)
        # stable sort: equal confidence keeps the lower unlabeled index first
        order = cand[np.argsort(-pseudo_hard.confidence[cand], kind="stable")]
        add.extend(order[:room].tolist())
    if not add:
        return val
    add = np.asarray(add, dtype=np.int64)
    pos = pseudo_hard.indices[add]
    return LabeledDataset(
        val.domain,
        np.concatenate([val.images, unlabeled.images[pos]]),
        np.concatenate([val.labels, pseudo_hard.labels[add]]),
        np.concatenate([val.rows, unlabeled.rows[pos]]),
    )


def label_precision(pseudo: PseudoLabeledSet, truth: np.ndarray) -> float:
    """Fraction of accepted hard labels matching the sealed ground truth."""
    if len(pseudo) == 0:
        return float("nan")
    pred = pseudo.labels if pseudo.mode == "hard" else pseudo.labels.argmax(axis=1)
    return float(np.mean(pred == truth[pseudo.indices]))


def write_manifest(pseudo: PseudoLabeledSet, path, member_digests: Sequence[str] = ()) -> None:
    m = pseudo.manifest()
    m["member_digests"] = list(member_digests)
    Path(path).write_text(json.dumps(m, indent=1))
