import json

import numpy as np
import pytest

import raildefect.curation as curation
from raildefect.classifier import extract_features
from raildefect.curation import (
    Candidate,
    CurationStore,
    auto_select,
    build_store,
    cosine_similarity,
    export_accepted,
    load_store,
    rank_candidates,
    record_decision,
    replay_log,
    save_store,
    select_by_threshold,
)
from raildefect.dataset import DefectClass, ImageRecord, read_image
from raildefect.errors import ManifestError, NotFoundError, ValidationError


# --- oracle (written before the assertions that use it) ----------------------

def cosine_oracle(a, b) -> float:
    """Pure-Python cosine: explicit sums, no numpy linear algebra."""
    dot = sum(float(x) * float(y) for x, y in zip(a, b))
    na = sum(float(x) ** 2 for x in a) ** 0.5
    nb = sum(float(y) ** 2 for y in b) ** 0.5
    if na == 0.0 or nb == 0.0:
        return 0.0
    return dot / (na * nb)


def _gan_record(rec: ImageRecord, new_id: str) -> ImageRecord:
    return ImageRecord(
        id=new_id,
        relative_path=rec.relative_path,
        label=DefectClass.SHELLING,
        split="train",
        provenance="gan_generated",
        source_id=rec.id,
    )


class TestCosineSimilarity:
    def test_zero_norm_flags_warning(self):
        sim, warn = cosine_similarity(np.zeros(4), np.ones(4))
        assert sim == 0.0
        assert warn is True

    def test_matches_oracle(self, rng):
        for _ in range(20):
            a = rng.normal(size=8)
            b = rng.normal(size=8)
            sim, warn = cosine_similarity(a, b)
            assert warn is False
            assert abs(sim - cosine_oracle(a, b)) < 1e-12

    def test_clamped_to_unit_interval(self):
        a = np.array([1.0, 0.0])
        sim, _ = cosine_similarity(a, a)
        assert sim == 1.0
        sim, _ = cosine_similarity(a, -a)
        assert sim == -1.0


class TestRankCandidates:
    def test_reference_among_candidates_ranks_first(self, tiny_model, tiny_corpus):
        records = tiny_corpus.select(split="train", label=DefectClass.SHELLING)
        candidates = [_gan_record(r, f"cand-{i:03d}") for i, r in enumerate(records)]
        reference = read_image(tiny_corpus.resolve(records[2]))
        ranked = rank_candidates(candidates, reference, tiny_model, tiny_corpus)
        assert ranked[0].record.id == "cand-002"
        assert abs(ranked[0].similarity - 1.0) <= 1e-6

    def test_orthogonal_features_tie_by_id(self, tiny_corpus, monkeypatch):
        records = tiny_corpus.select(split="train", label=DefectClass.NORMAL)[:3]
        candidates = [_gan_record(r, cid) for r, cid in zip(records, ["b", "a", "ref"])]
        by_mean = {
            round(float(read_image(tiny_corpus.resolve(r)).mean()), 6): cid
            for r, cid in zip(records, ["b", "a", "ref"])
        }
        vectors = {"ref": [1.0, 0.0, 0.0], "a": [0.0, 1.0, 0.0], "b": [0.0, 0.0, 1.0]}

        def fake_features(model, image):
            cid = by_mean[round(float(np.asarray(image).mean()), 6)]
            return np.array(vectors[cid])

        monkeypatch.setattr(curation, "extract_features", fake_features)
        reference = read_image(tiny_corpus.resolve(records[2]))
        ranked = rank_candidates(candidates[:2], reference, model=None, manifest=tiny_corpus)
        assert [c.similarity for c in ranked] == [0.0, 0.0]
        assert [c.record.id for c in ranked] == ["a", "b"]

    def test_hundred_candidates_match_independent_sort(self, tiny_model, tiny_corpus, rng):
        train = tiny_corpus.select(split="train")
        picks = rng.choice(len(train), size=100, replace=True)
        candidates = [_gan_record(train[int(i)], f"c-{n:03d}") for n, i in enumerate(picks)]
        ref_rec = tiny_corpus.select(split="test", label=DefectClass.SHELLING)[0]
        reference = read_image(tiny_corpus.resolve(ref_rec))

        ranked = rank_candidates(candidates, reference, tiny_model, tiny_corpus)

        ref_feat = extract_features(tiny_model, reference)
        scored = []
        for cand in candidates:
            feat = extract_features(tiny_model, read_image(tiny_corpus.resolve(cand)))
            scored.append((cosine_oracle(feat, ref_feat), cand.id))
        scored.sort(key=lambda t: (-t[0], t[1]))

        assert [c.record.id for c in ranked] == [cid for _, cid in scored]
        for cand, (sim, _) in zip(ranked, scored):
            assert abs(cand.similarity - sim) < 1e-9

    def test_rank_is_a_permutation(self, tiny_model, tiny_corpus):
        records = tiny_corpus.select(split="train")[:10]
        candidates = [_gan_record(r, f"p-{i}") for i, r in enumerate(records)]
        reference = read_image(tiny_corpus.resolve(records[0]))
        ranked = rank_candidates(candidates, reference, tiny_model, tiny_corpus)
        assert sorted(c.record.id for c in ranked) == sorted(c.id for c in candidates)


def _store_with(sims: dict[str, float]) -> CurationStore:
    candidates = [
        Candidate(
            record=ImageRecord(
                id=cid,
                relative_path=f"gan/{cid}.png",
                label=DefectClass.SHELLING,
                split="train",
                provenance="gan_generated",
                source_id="src",
            ),
            similarity=sim,
        )
        for cid, sim in sims.items()
    ]
    return build_store(candidates, reference_image_id="ref")


class TestDecisions:
    def test_accept_updates_status_and_log(self):
        store = _store_with({"x": 0.9, "y": 0.5})
        cand = record_decision(store, "x", "accepted")
        assert cand.status == "accepted"
        assert cand.decided_at is not None
        assert len(store.decision_log) == 1
        assert store.decision_log[0]["candidate_id"] == "x"
        assert store.decision_log[0]["idempotent"] is False

    def test_repeat_decision_is_idempotent(self):
        store = _store_with({"x": 0.9})
        first = record_decision(store, "x", "accepted")
        decided_at = first.decided_at
        again = record_decision(store, "x", "accepted")
        assert again.status == "accepted"
        assert again.decided_at == decided_at
        assert len(store.decision_log) == 2
        assert store.decision_log[1]["idempotent"] is True

    def test_re_decision_allowed(self):
        store = _store_with({"x": 0.9})
        record_decision(store, "x", "accepted")
        cand = record_decision(store, "x", "rejected")
        assert cand.status == "rejected"

    def test_unknown_id_leaves_store_unchanged(self):
        store = _store_with({"x": 0.9})
        with pytest.raises(NotFoundError):
            record_decision(store, "nope", "accepted")
        assert store.decision_log == []
        assert store.get("x").status == "pending"

    def test_invalid_status_rejected(self):
        store = _store_with({"x": 0.9})
        with pytest.raises(ValidationError):
            record_decision(store, "x", "maybe")

    def test_replay_reproduces_statuses(self):
        store = _store_with({"a": 0.9, "b": 0.8, "c": 0.7})
        record_decision(store, "a", "accepted")
        record_decision(store, "b", "rejected")
        record_decision(store, "a", "rejected")
        record_decision(store, "a", "accepted")
        record_decision(store, "c", "accepted")
        record_decision(store, "c", "accepted")
        replayed = replay_log(store)
        assert replayed == {cid: c.status for cid, c in store.candidates.items()}


class TestSelection:
    def test_auto_select_top_k(self):
        store = _store_with({"a": 0.9, "b": 0.8, "c": 0.7, "d": 0.6})
        chosen = auto_select(store, 2)
        assert [c.record.id for c in chosen] == ["a", "b"]
        assert store.get("c").status == "pending"

    def test_auto_select_zero_is_noop(self):
        store = _store_with({"a": 0.9})
        assert auto_select(store, 0) == []
        assert store.get("a").status == "pending"
        assert store.decision_log == []

    def test_auto_select_clamps_to_pending(self):
        store = _store_with({"a": 0.9, "b": 0.8})
        record_decision(store, "a", "rejected")
        chosen = auto_select(store, 10)
        assert [c.record.id for c in chosen] == ["b"]

    def test_negative_k_rejected(self):
        with pytest.raises(ValidationError):
            auto_select(_store_with({"a": 0.5}), -1)

    def test_threshold_selection(self):
        store = _store_with({"a": 0.9, "b": 0.6, "c": 0.3})
        chosen = select_by_threshold(store, 0.6)
        assert sorted(c.record.id for c in chosen) == ["a", "b"]
        assert store.get("c").status == "pending"


class TestExport:
    def _candidates_from(self, manifest, k: int) -> list[Candidate]:
        normals = manifest.select(split="train", label=DefectClass.NORMAL)[:k]
        return [
            Candidate(
                record=ImageRecord(
                    id=f"g-{i:02d}",
                    relative_path=f"gan/g-{i:02d}.png",
                    label=DefectClass.SHELLING,
                    split="train",
                    provenance="gan_generated",
                    source_id=r.id,
                ),
                similarity=1.0 - i * 0.01,
            )
            for i, r in enumerate(normals)
        ]

    def test_zero_accepted_is_identity(self, tiny_corpus):
        store = build_store(self._candidates_from(tiny_corpus, 4), "ref")
        augmented = export_accepted(store, tiny_corpus)
        assert [r.id for r in augmented.records] == [r.id for r in tiny_corpus.records]
        assert augmented.class_counts == tiny_corpus.class_counts

    def test_accepted_added_to_rare_class(self, tiny_corpus, tmp_path):
        store = build_store(self._candidates_from(tiny_corpus, 6), "ref")
        auto_select(store, 5)
        out = tmp_path / "augmented.json"
        augmented = export_accepted(store, tiny_corpus, out_path=out)
        base = tiny_corpus.count(split="train", label=DefectClass.SHELLING)
        assert augmented.count(split="train", label=DefectClass.SHELLING) == base + 5
        assert out.is_file()
        loaded = json.loads(out.read_text())
        assert loaded["schema_version"] == 1

    def test_rejected_then_accepted_included_once(self, tiny_corpus):
        store = build_store(self._candidates_from(tiny_corpus, 3), "ref")
        record_decision(store, "g-00", "rejected")
        record_decision(store, "g-00", "accepted")
        augmented = export_accepted(store, tiny_corpus)
        added = [r for r in augmented.records if r.provenance == "gan_generated"]
        assert [r.id for r in added] == ["g-00"]

    def test_test_split_untouched(self, tiny_corpus):
        store = build_store(self._candidates_from(tiny_corpus, 6), "ref")
        auto_select(store, 6)
        augmented = export_accepted(store, tiny_corpus)
        base_test = [(r.id, r.label) for r in tiny_corpus.records if r.split == "test"]
        aug_test = [(r.id, r.label) for r in augmented.records if r.split == "test"]
        assert base_test == aug_test


class TestStorePersistence:
    def test_round_trip(self, tmp_path):
        store = _store_with({"a": 0.9, "b": 0.8})
        record_decision(store, "a", "accepted")
        path = tmp_path / "store.json"
        save_store(store, path)
        clone = load_store(path)
        assert clone.to_json() == store.to_json()

    def test_missing_file(self, tmp_path):
        with pytest.raises(NotFoundError):
            load_store(tmp_path / "absent.json")

    def test_corrupt_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{broken")
        with pytest.raises(ManifestError):
            load_store(path)

    def test_duplicate_candidate_rejected(self):
        cand = _store_with({"a": 0.9}).get("a")
        with pytest.raises(ValidationError):
            build_store([cand, cand], "ref")
