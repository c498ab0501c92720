import pytest

from adaptagen.backends import MockCaptioner
from adaptagen.captioning import (
    CandidateCaption,
    CaptionTask,
    default_templates,
    generate_candidates,
    load_candidates,
    save_candidates,
)
from adaptagen.dataset import ImageRecord, sample_per_category, scan_dataset


def records_for(n=4, category="pizza"):
    return [
        ImageRecord(image_id=f"{category}/img{i:03d}", category=category, path=f"{category}/img{i:03d}.png")
        for i in range(n)
    ]


class TestTemplates:
    def test_four_templates_cover_all_perspectives(self):
        templates = default_templates()
        assert len(templates) == 4
        assert {t.perspective for t in templates} == {
            "object_recognition",
            "scene_composition",
            "subject_emphasis",
            "contextual_interpretation",
        }

    def test_ids_stable_across_calls(self):
        assert [t.template_id for t in default_templates()] == [
            t.template_id for t in default_templates()
        ]
        assert [t.template_id for t in default_templates()] == [
            "t_obj", "t_scene", "t_subj", "t_ctx",
        ]

    def test_instruction_texts_non_empty(self):
        assert all(t.instruction_text.strip() for t in default_templates())


class TestGenerateCandidates:
    def test_n_times_m_captions(self):
        run = generate_candidates(records_for(16), default_templates(), MockCaptioner(), seed=0)
        assert len(run.sets) == 16
        assert all(len(s.candidates) == 4 for s in run.sets)
        assert sum(len(s.candidates) for s in run.sets) == 64
        assert not run.failures

    def test_empty_template_list_fatal(self):
        with pytest.raises(ValueError, match="non-empty"):
            generate_candidates(records_for(2), [], MockCaptioner(), seed=0)

    def test_candidate_order_matches_template_order(self):
        templates = default_templates()
        run = generate_candidates(records_for(2), templates, MockCaptioner(), seed=0)
        for s in run.sets:
            assert [c.template_id for c in s.candidates] == [
                t.template_id for t in templates
            ]

    def test_deterministic_files(self, tmp_path):
        paths = []
        for name in ("a.jsonl", "b.jsonl"):
            run = generate_candidates(
                records_for(4), default_templates(), MockCaptioner(), seed=9
            )
            path = tmp_path / name
            save_candidates(run.sets, path)
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_unreadable_image_collected_not_fatal(self, dataset_root):
        manifest = sample_per_category(scan_dataset(dataset_root), 4, seed=0)
        records = list(manifest.records)
        records.append(
            ImageRecord(image_id="pizza/ghost", category="pizza", path="pizza/ghost.png")
        )
        run = generate_candidates(
            records, default_templates(), MockCaptioner(), seed=0, root=dataset_root
        )
        assert len(run.sets) == len(manifest.records)
        assert [f.image_id for f in run.failures] == ["pizza/ghost"]

    def test_empty_backend_output_retried_then_failed(self):
        class FlakyBackend:
            name = "flaky"
            concurrency_safe = False

            def __init__(self):
                self.calls = 0

            def caption(self, task):
                self.calls += 1
                if task.image_id.endswith("000"):
                    return ""  # always empty for this record
                return f"fine photo of {task.category}"

        backend = FlakyBackend()
        run = generate_candidates(records_for(3), default_templates()[:1], backend, seed=0)
        assert [f.image_id for f in run.failures] == ["pizza/img000"]
        assert len(run.sets) == 2
        # the empty record was attempted twice before being excluded
        assert backend.calls == 4

    def test_retry_recovers_on_second_attempt(self):
        class SecondTryBackend:
            name = "second-try"
            concurrency_safe = False
            seen: set = set()

            def caption(self, task):
                key = (task.image_id, task.template_id)
                if key not in self.seen:
                    self.seen.add(key)
                    return "   "
                return f"photo of {task.category}"

        run = generate_candidates(
            records_for(2), default_templates()[:2], SecondTryBackend(), seed=0
        )
        assert not run.failures
        assert len(run.sets) == 2

    def test_backend_exception_is_per_record(self):
        class ExplodingBackend:
            name = "bad"
            concurrency_safe = False

            def caption(self, task):
                if task.image_id.endswith("001"):
                    raise RuntimeError("boom")
                return f"photo of {task.category}"

        run = generate_candidates(records_for(3), default_templates(), ExplodingBackend(), seed=0)
        assert [f.image_id for f in run.failures] == ["pizza/img001"]
        assert len(run.sets) == 2

    def test_parallel_equals_serial(self):
        templates = default_templates()
        serial = generate_candidates(records_for(8), templates, MockCaptioner(), seed=1)
        parallel = generate_candidates(
            records_for(8), templates, MockCaptioner(), seed=1, max_workers=4
        )
        assert serial.sets == parallel.sets


class TestMockCaptioner:
    def test_pure_function_of_ids_and_category(self):
        task = dict(
            image_id="pizza/img000",
            category="pizza",
            image_path=None,
            template_id="t_obj",
            perspective="object_recognition",
            instruction_text="whatever",
        )
        a = MockCaptioner().caption(CaptionTask(**task, seed=1))
        b = MockCaptioner().caption(CaptionTask(**task, seed=999))
        assert a == b  # replayable: seed and instruction do not matter

    def test_contains_category_tokens(self):
        task = CaptionTask(
            image_id="apple_scab/img003",
            category="apple_scab",
            image_path=None,
            template_id="t_scene",
            perspective="scene_composition",
            instruction_text="x",
            seed=0,
        )
        text = MockCaptioner().caption(task)
        assert "apple scab" in text
        assert "photo of" in text

    def test_distinct_across_templates(self):
        texts = set()
        for tid, persp in (("t_obj", "object_recognition"), ("t_subj", "subject_emphasis")):
            texts.add(
                MockCaptioner().caption(
                    CaptionTask(
                        image_id="pizza/img000",
                        category="pizza",
                        image_path=None,
                        template_id=tid,
                        perspective=persp,
                        instruction_text="x",
                        seed=0,
                    )
                )
            )
        assert len(texts) == 2


class TestPersistence:
    def test_jsonl_round_trip(self, tmp_path):
        run = generate_candidates(records_for(3), default_templates(), MockCaptioner(), seed=2)
        path = tmp_path / "captions_raw.jsonl"
        save_candidates(run.sets, path)
        assert load_candidates(path) == run.sets

    def test_caption_text_stripped(self):
        c = CandidateCaption(image_id="a", template_id="t", text="  padded  ")
        assert c.text == "padded"

    def test_empty_caption_rejected(self):
        with pytest.raises(ValueError, match="empty caption"):
            CandidateCaption(image_id="a", template_id="t", text="   ")
