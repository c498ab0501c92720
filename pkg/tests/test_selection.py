import math

import numpy as np
import pytest

from adaptagen.backends import MockEmbedder
from adaptagen.captioning import CandidateCaption, CandidateSet
from adaptagen.dataset import ImageRecord
from adaptagen.errors import SelectionError
from adaptagen.selection import (
    EmbeddingVector,
    ImageRef,
    SimilarityMatrix,
    build_similarity_matrix,
    cosine,
    load_selected,
    save_selected,
    select_optimal,
)


def brute_force_cosine(u, v):
    """Independent oracle: plain-Python cosine."""
    dot = sum(a * b for a, b in zip(u, v))
    nu = math.sqrt(sum(a * a for a in u))
    nv = math.sqrt(sum(b * b for b in v))
    return dot / (nu * nv)


class StubEmbedder:
    """Returns pre-assigned vectors for images and caption texts."""

    name = "stub"

    def __init__(self, image_vectors, text_vectors):
        self.image_vectors = image_vectors
        self.text_vectors = text_vectors

    def embed_image(self, ref):
        return EmbeddingVector(self.image_vectors[ref.image_id])

    def embed_text(self, text):
        return EmbeddingVector(self.text_vectors[text])


def make_instance(rng, n=10, m=6, dim=8, tie_rows=()):
    """Random instance; tie_rows get candidate 2 cloned from candidate 0."""
    records, sets, image_vectors, text_vectors = [], [], {}, {}
    for i in range(n):
        image_id = f"cat/img{i:03d}"
        records.append(ImageRecord(image_id=image_id, category="cat", path=f"x/{i}.png"))
        image_vectors[image_id] = rng.normal(size=dim)
        candidates = []
        for j in range(m):
            text = f"caption {i} {j}"
            vec = rng.normal(size=dim)
            if i in tie_rows and j == 2:
                vec = image_vectors[image_id].copy()
                text_vectors[f"caption {i} 0"] = vec  # exact tie between j=0 and j=2
            text_vectors[text] = vec
            candidates.append(
                CandidateCaption(image_id=image_id, template_id=f"t{j}", text=text)
            )
        sets.append(CandidateSet(image_id=image_id, candidates=candidates))
    return records, sets, StubEmbedder(image_vectors, text_vectors)


class TestCosine:
    def test_self_similarity_is_one(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            v = EmbeddingVector(rng.normal(size=8))
            assert cosine(v, v) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_is_zero(self):
        assert cosine(EmbeddingVector([1, 0]), EmbeddingVector([0, 1])) == 0.0

    def test_hand_computed_value(self):
        # dot = 8, norms = 3 * 3
        assert cosine(EmbeddingVector([1, 2, 2]), EmbeddingVector([2, 1, 2])) == pytest.approx(8 / 9)

    def test_dimension_mismatch_fatal(self):
        with pytest.raises(ValueError, match="mismatch"):
            cosine(EmbeddingVector([1, 0]), EmbeddingVector([1, 0, 0]))

    def test_zero_vector_rejected_at_construction(self):
        with pytest.raises(ValueError, match="zero-norm"):
            EmbeddingVector([0.0, 0.0])

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            EmbeddingVector([1.0, float("nan")])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            u, v = rng.normal(size=6), rng.normal(size=6)
            assert cosine(EmbeddingVector(u), EmbeddingVector(v)) == pytest.approx(
                brute_force_cosine(u, v), abs=1e-12
            )


class TestBuildMatrix:
    def test_shape_contract(self):
        rng = np.random.default_rng(2)
        records, sets, backend = make_instance(rng, n=2, m=3)
        matrix = build_similarity_matrix(records, sets, backend)
        assert matrix.entries.shape == (2, 3)

    def test_constant_embedding_gives_all_ones(self):
        rng = np.random.default_rng(3)
        records, sets, _ = make_instance(rng, n=3, m=2)

        class ConstantBackend:
            name = "const"

            def embed_image(self, ref):
                return EmbeddingVector([1.0, 0.0, 0.0])

            def embed_text(self, text):
                return EmbeddingVector([1.0, 0.0, 0.0])

        matrix = build_similarity_matrix(records, sets, ConstantBackend())
        assert np.allclose(matrix.entries, 1.0)

    def test_matches_per_pair_oracle(self):
        rng = np.random.default_rng(4)
        records, sets, backend = make_instance(rng, n=10, m=6)
        matrix = build_similarity_matrix(records, sets, backend)
        for i, (rec, cs) in enumerate(zip(records, sets)):
            for j, cand in enumerate(cs.candidates):
                expected = brute_force_cosine(
                    backend.image_vectors[rec.image_id],
                    backend.text_vectors[cand.text],
                )
                assert matrix.entries[i, j] == pytest.approx(expected, abs=1e-12)

    def test_backend_failure_names_item(self):
        rng = np.random.default_rng(5)
        records, sets, backend = make_instance(rng, n=2, m=2)

        class BrokenBackend:
            name = "broken"

            def embed_image(self, ref):
                raise RuntimeError("no weights")

            def embed_text(self, text):
                return EmbeddingVector([1.0])

        with pytest.raises(SelectionError, match="cat/img000"):
            build_similarity_matrix(records, sets, BrokenBackend())

    def test_misaligned_sets_fatal(self):
        rng = np.random.default_rng(6)
        records, sets, backend = make_instance(rng, n=2, m=2)
        with pytest.raises(ValueError, match="misaligned"):
            build_similarity_matrix(records, list(reversed(sets)), backend)


class TestSelectOptimal:
    def _matrix(self, rows, sets):
        refs = [[(cs.image_id, c.template_id) for c in cs.candidates] for cs in sets]
        return SimilarityMatrix(
            image_ids=[cs.image_id for cs in sets],
            entries=np.asarray(rows),
            caption_refs=refs,
        )

    def _sets(self, n, m):
        return [
            CandidateSet(
                image_id=f"c/i{i}",
                candidates=[
                    CandidateCaption(image_id=f"c/i{i}", template_id=f"t{j}", text=f"x {i} {j}")
                    for j in range(m)
                ],
            )
            for i in range(n)
        ]

    def test_unique_maximum(self):
        sets = self._sets(1, 3)
        picked = select_optimal(self._matrix([[0.1, 0.9, 0.3]], sets), sets)
        assert picked[0].template_id == "t1"
        assert picked[0].score == pytest.approx(0.9)

    def test_tie_breaks_to_lowest_index(self):
        sets = self._sets(1, 3)
        picked = select_optimal(self._matrix([[0.5, 0.5, 0.2]], sets), sets)
        assert picked[0].template_id == "t0"

    def test_matches_brute_force_argmax(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            rows = rng.uniform(-1, 1, size=(10, 6))
            sets = self._sets(10, 6)
            picked = select_optimal(self._matrix(rows, sets), sets)
            for i, sel in enumerate(picked):
                best_j, best = 0, rows[i][0]
                for j in range(1, 6):
                    if rows[i][j] > best:
                        best_j, best = j, rows[i][j]
                assert sel.template_id == f"t{best_j}"
                assert sel.score == pytest.approx(best)

    def test_score_equals_row_max(self):
        rng = np.random.default_rng(8)
        records, sets, backend = make_instance(rng, n=6, m=4)
        matrix = build_similarity_matrix(records, sets, backend)
        for i, sel in enumerate(select_optimal(matrix, sets)):
            assert sel.score == pytest.approx(matrix.entries[i].max())


class TestProperties:
    def test_scale_invariance_of_selection(self):
        rng = np.random.default_rng(9)
        records, sets, backend = make_instance(rng, n=5, m=4)
        scaled = StubEmbedder(
            {k: 3.7 * v for k, v in backend.image_vectors.items()},
            {k: 0.2 * v for k, v in backend.text_vectors.items()},
        )
        m1 = build_similarity_matrix(records, sets, backend)
        m2 = build_similarity_matrix(records, sets, scaled)
        assert np.allclose(m1.entries, m2.entries, atol=1e-12)
        for a, b in zip(select_optimal(m1, sets), select_optimal(m2, sets)):
            assert (a.image_id, a.template_id, a.text) == (b.image_id, b.template_id, b.text)
            assert a.score == pytest.approx(b.score, abs=1e-12)

    def test_row_independence_under_permutation(self):
        rng = np.random.default_rng(10)
        records, sets, backend = make_instance(rng, n=6, m=3)
        perm = [4, 0, 5, 2, 1, 3]
        m1 = build_similarity_matrix(records, sets, backend)
        m2 = build_similarity_matrix(
            [records[i] for i in perm], [sets[i] for i in perm], backend
        )
        assert np.allclose(m1.entries[perm], m2.entries)
        sel1 = select_optimal(m1, sets)
        sel2 = select_optimal(m2, [sets[i] for i in perm])
        assert [sel1[i] for i in perm] == sel2

    def test_entries_bounded(self):
        rng = np.random.default_rng(11)
        records, sets, backend = make_instance(rng, n=8, m=5)
        matrix = build_similarity_matrix(records, sets, backend)
        assert np.all(matrix.entries <= 1.0 + 1e-9)
        assert np.all(matrix.entries >= -1.0 - 1e-9)


class TestPersistence:
    def test_matrix_round_trip(self, tmp_path):
        rng = np.random.default_rng(12)
        records, sets, backend = make_instance(rng, n=3, m=2)
        matrix = build_similarity_matrix(records, sets, backend)
        path = tmp_path / "similarity_matrix.json"
        matrix.save(path)
        loaded = SimilarityMatrix.load(path)
        assert loaded.image_ids == matrix.image_ids
        assert np.allclose(loaded.entries, matrix.entries)
        assert loaded.caption_refs == matrix.caption_refs

    def test_selected_round_trip(self, tmp_path):
        rng = np.random.default_rng(13)
        records, sets, backend = make_instance(rng, n=3, m=2)
        matrix = build_similarity_matrix(records, sets, backend)
        selected = select_optimal(matrix, sets)
        path = tmp_path / "captions_selected.jsonl"
        save_selected(selected, path)
        assert load_selected(path) == selected


class TestMockEmbedder:
    def test_deterministic(self):
        a = MockEmbedder().embed_text("a photo of pizza")
        b = MockEmbedder().embed_text("a photo of pizza")
        assert np.allclose(a.values, b.values)

    def test_shared_dimension(self, dataset_root):
        backend = MockEmbedder()
        img = backend.embed_image(
            ImageRef(
                image_id="pizza/img000",
                category="pizza",
                path=dataset_root / "pizza" / "img000.png",
            )
        )
        txt = backend.embed_text("a photo of pizza")
        assert img.dim == txt.dim

    def test_category_match_scores_higher(self, dataset_root):
        backend = MockEmbedder()
        img = backend.embed_image(
            ImageRef(
                image_id="pizza/img000",
                category="pizza",
                path=dataset_root / "pizza" / "img000.png",
            )
        )
        on_topic = backend.embed_text("a close-up photo of pizza")
        off_topic = backend.embed_text("a wide-angle photo of apple scab")
        assert cosine(img, on_topic) > cosine(img, off_topic)
