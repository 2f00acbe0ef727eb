"""Candidate review: similarity ranking, accept/reject log, export for retraining.

The store is a single JSON document with an append-only decision log; writes
go through a temp file + rename. Similarity is the cosine between classifier
penultimate features of the candidate and of the reference missed-defect
image, so "similar" means similar to the model that missed it.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .classifier import ClassifierModel, extract_features
from .dataset import DefectClass, ImageRecord, Manifest, merge_augmented, save_manifest
from .errors import ManifestError, NotFoundError, ValidationError

STATUSES = ("pending", "accepted", "rejected")


@dataclass
class Candidate:
    record: ImageRecord
    similarity: float
    status: str = "pending"
    decided_at: Optional[str] = None
    zero_norm_warning: bool = False

    def to_json(self) -> dict:
        return {
            "record": self.record.to_json(),
            "similarity": self.similarity,
            "status": self.status,
            "decided_at": self.decided_at,
            "zero_norm_warning": self.zero_norm_warning,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Candidate":
        return cls(
            record=ImageRecord.from_json(obj["record"]),
            similarity=float(obj["similarity"]),
            status=str(obj.get("status", "pending")),
            decided_at=obj.get("decided_at"),
            zero_norm_warning=bool(obj.get("zero_norm_warning", False)),
        )


@dataclass
class CurationStore:
    candidates: dict[str, Candidate] = field(default_factory=dict)
    reference_image_id: str = ""
    model_checkpoint_id: str = ""
    decision_log: list[dict] = field(default_factory=list)

    def ordered(self) -> list[Candidate]:
        """Similarity-descending, id-ascending on ties (the ranking order)."""
        return sorted(
            self.candidates.values(), key=lambda c: (-c.similarity, c.record.id)
        )

    def get(self, candidate_id: str) -> Candidate:
        try:
            return self.candidates[candidate_id]
        except KeyError:
            raise NotFoundError(f"unknown candidate id {candidate_id!r}") from None

    def to_json(self) -> dict:
        return {
            "schema_version": 1,
            "reference_image_id": self.reference_image_id,
            "model_checkpoint_id": self.model_checkpoint_id,
            "candidates": [c.to_json() for c in self.ordered()],
            "decision_log": self.decision_log,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CurationStore":
        store = cls(
            reference_image_id=str(obj.get("reference_image_id", "")),
            model_checkpoint_id=str(obj.get("model_checkpoint_id", "")),
            decision_log=list(obj.get("decision_log", [])),
        )
        for c_obj in obj.get("candidates", []):
            cand = Candidate.from_json(c_obj)
            if cand.record.id in store.candidates:
                raise ManifestError(f"duplicate candidate id {cand.record.id!r}")
            store.candidates[cand.record.id] = cand
        return store


def save_store(store: CurationStore, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(store.to_json(), indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def load_store(path: Path | str) -> CurationStore:
    path = Path(path)
    if not path.is_file():
        raise NotFoundError(f"curation store not found: {path}")
    try:
        return CurationStore.from_json(json.loads(path.read_text()))
    except json.JSONDecodeError as e:
        raise ManifestError(f"curation store {path} is not valid JSON: {e}") from e


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> tuple[float, bool]:
    """Cosine in [-1,1]; zero-norm inputs yield (0.0, warning=True)."""
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0, True
    sim = float(np.dot(a, b) / (na * nb))
    return max(-1.0, min(1.0, sim)), False


def rank_candidates(
    candidate_records: Sequence[ImageRecord],
    reference_image: np.ndarray,
    model: ClassifierModel,
    manifest: Manifest,
) -> list[Candidate]:
    """Score each candidate by feature-space cosine against the reference.

    Returns candidates sorted similarity-descending with id tie-breaks; the
    multiset of ids is preserved (pure reordering plus scores).
    """
    ref_feat = extract_features(model, reference_image)
    out: list[Candidate] = []
    for rec in candidate_records:
        from .dataset import read_image

        feat = extract_features(model, read_image(manifest.resolve(rec)))
        sim, warn = cosine_similarity(feat, ref_feat)
        out.append(Candidate(record=rec, similarity=sim, zero_norm_warning=warn))
    out.sort(key=lambda c: (-c.similarity, c.record.id))
    return out


def build_store(
    candidates: Sequence[Candidate],
    reference_image_id: str,
    model_checkpoint_id: str = "",
) -> CurationStore:
    store = CurationStore(
        reference_image_id=reference_image_id,
        model_checkpoint_id=model_checkpoint_id,
    )
    for cand in candidates:
        if cand.record.id in store.candidates:
            raise ValidationError(f"candidate id collision {cand.record.id!r}")
        store.candidates[cand.record.id] = cand
    return store


def _now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def record_decision(
    store: CurationStore, candidate_id: str, status: str
) -> Candidate:
    """Apply an accept/reject decision; appends to the log, idempotent."""
    if status not in ("accepted", "rejected"):
        raise ValidationError(f"status must be accepted or rejected, got {status!r}")
    cand = store.get(candidate_id)
    idempotent = cand.status == status
    at = _now_iso()
    store.decision_log.append(
        {
            "seq": len(store.decision_log),
            "candidate_id": candidate_id,
            "status": status,
            "at": at,
            "idempotent": idempotent,
        }
    )
    if not idempotent:
        cand.status = status
        cand.decided_at = at
    return cand


def replay_log(store: CurationStore) -> dict[str, str]:
    """Statuses obtained by replaying the decision log over pending candidates."""
    statuses = {cid: "pending" for cid in store.candidates}
    for entry in store.decision_log:
        cid = entry["candidate_id"]
        if cid in statuses:
            statuses[cid] = entry["status"]
    return statuses


def auto_select(store: CurationStore, k: int) -> list[Candidate]:
    """Accept the top-k pending candidates by similarity; returns them."""
    if k < 0:
        raise ValidationError("k must be >= 0")
    pending = [c for c in store.ordered() if c.status == "pending"]
    chosen = pending[: min(k, len(pending))]
    for cand in chosen:
        record_decision(store, cand.record.id, "accepted")
    return chosen


def select_by_threshold(store: CurationStore, threshold: float) -> list[Candidate]:
    """Accept every pending candidate with similarity >= threshold."""
    chosen = [
        c
        for c in store.ordered()
        if c.status == "pending" and c.similarity >= threshold
    ]
    for cand in chosen:
        record_decision(store, cand.record.id, "accepted")
    return chosen


def accepted_records(store: CurationStore) -> list[ImageRecord]:
    """Records whose current status is accepted (status, not log, decides)."""
    return [c.record for c in store.ordered() if c.status == "accepted"]


def export_accepted(
    store: CurationStore,
    base_manifest: Manifest,
    out_path: Optional[Path | str] = None,
    target_class: DefectClass = DefectClass.SHELLING,
) -> Manifest:
    """Merge accepted candidates into the base manifest; optionally write it."""
    augmented = merge_augmented(base_manifest, accepted_records(store), target_class)
    if out_path is not None:
        save_manifest(augmented, out_path)
    return augmented
