import numpy as np
import pytest

from vtldoc.corpus import at_resolution, render_document, synth_document
from vtldoc.geometry import BBox, LayoutQuantizer, PatchGrid
from vtldoc.tasks import (
    EmptyDocumentError,
    MissingAnnotationError,
    TaskConfig,
    build_joint_text_layout,
    build_layout_modeling,
    build_masked_image,
    build_supervised,
    build_visual_text_recognition,
    example_seed,
    sample_mask_spans,
)
from vtldoc.vocab import NULL_BBOX, detokenize, encode_mixed, parse_layout_groups

from conftest import WORKED_SPANS

CFG = TaskConfig()
Q = LayoutQuantizer(500)


class TestSampleSpans:
    def test_exact_count_small(self):
        rng = np.random.default_rng(0)
        spans = sample_mask_spans(9, 0.15, 3, rng)
        assert sum(e - s for s, e in spans) == 1  # round(1.35)

    def test_exact_count_every_draw(self):
        for seed in range(200):
            rng = np.random.default_rng(seed)
            spans = sample_mask_spans(100, 0.15, 3, rng)
            assert sum(e - s for s, e in spans) == 15

    def test_dense_ratio(self):
        rng = np.random.default_rng(1)
        spans = sample_mask_spans(4, 0.75, 3, rng)
        assert sum(e - s for s, e in spans) == 3

    def test_half_up_rounding(self):
        rng = np.random.default_rng(2)
        spans = sample_mask_spans(9, 0.50, 3, rng)
        assert sum(e - s for s, e in spans) == 5  # round(4.5) half-up

    def test_disjoint_sorted_in_range(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            spans = sample_mask_spans(50, 0.4, 3, rng)
            seen = set()
            prev_end = -1
            for s, e in spans:
                assert 0 <= s < e <= 50
                assert s > prev_end - 1 and s >= prev_end
                idx = set(range(s, e))
                assert not (idx & seen)
                seen |= idx
                prev_end = e

    def test_zero_budget(self):
        rng = np.random.default_rng(0)
        assert sample_mask_spans(1, 0.15, 3, rng) == []

    def test_single_word(self):
        rng = np.random.default_rng(0)
        assert sample_mask_spans(1, 0.75, 3, rng) == [(0, 1)]

    def test_empty_doc_rejected(self):
        with pytest.raises(EmptyDocumentError):
            sample_mask_spans(0, 0.15, 3, np.random.default_rng(0))


class TestWorkedExampleBlocks:
    def test_joint(self, worked_doc, vocab):
        ex = build_joint_text_layout(worked_doc, vocab, CFG, 0, spans=WORKED_SPANS)
        assert detokenize(ex.input_items, vocab) == (
            "Joint Text-Layout Reconstruction. <text_layout_0> to Retail: Week "
            "<text_layout_1> March 14, 1994"
        )
        assert detokenize(ex.target_items, vocab) == (
            "<text_layout_0> Ship Date <100><350><118><372> "
            "<text_layout_1> of <100><370><118><382>"
        )

    def test_layout_modeling(self, worked_doc, vocab):
        ex = build_layout_modeling(worked_doc, vocab, CFG, 0, spans=WORKED_SPANS)
        assert detokenize(ex.input_items, vocab) == (
            "Layout Modeling. <layout_0> Ship Date </layout_0> to Retail: Week "
            "<layout_1> of </layout_1> March 14, 1994"
        )
        assert detokenize(ex.target_items, vocab) == (
            "<layout_0> <100><350><118><372> <layout_1> <100><370><118><382>"
        )

    def test_visual_text(self, worked_doc, vocab):
        ex = build_visual_text_recognition(worked_doc, vocab, CFG, 0, spans=WORKED_SPANS)
        assert detokenize(ex.input_items, vocab) == (
            "Visual Text Recognition. <text_0> <100><350><118><372> </text_0> "
            "to Retail: Week <text_1> <100><370><118><382> </text_1> March 14, 1994"
        )
        assert detokenize(ex.target_items, vocab) == "<text_0> Ship Date <text_1> of"

    def test_masked_image_input_is_full_text(self, worked_doc, vocab):
        doc = at_resolution(worked_doc, 32, 32)
        ex = build_masked_image(doc, vocab, TaskConfig(patch=16), 0)
        assert detokenize(ex.input_items, vocab) == (
            "Masked Image Reconstruction. Ship Date to Retail: Week of March 14, 1994"
        )
        assert np.array_equal(ex.pixel_target, doc.image)

    def test_no_spans_degenerate(self, worked_doc, vocab):
        ex = build_joint_text_layout(worked_doc, vocab, CFG, 0, spans=[])
        assert ex.target_items == []


class TestBboxDiscipline:
    @pytest.mark.parametrize(
        "builder", [build_joint_text_layout, build_layout_modeling, build_visual_text_recognition]
    )
    def test_only_prompt_sentinel_layout_zero(self, worked_doc, vocab, builder):
        ex = builder(worked_doc, vocab, CFG, 0, spans=WORKED_SPANS)
        prompt_len = len(ex.task.split())  # prompt words precede everything
        doc_words = {w for w, _ in worked_doc.words}
        for i, it in enumerate(ex.input_items):
            if it.kind in ("sentinel_open", "sentinel_close", "layout"):
                assert it.bbox == NULL_BBOX
            elif it.surface in doc_words:
                assert not it.bbox.is_null
            else:  # prompt word
                assert it.bbox == NULL_BBOX


class TestMaskedImage:
    def test_exact_mask_count(self, vocab):
        doc = synth_document(0, 0, 128, 128)  # 8x8 grid = 64 patches
        ex = build_masked_image(doc, vocab, TaskConfig(patch=16, ratio_image_patches=0.75), 5)
        assert ex.patch_mask.sum() == 48

    def test_zero_ratio(self, vocab):
        doc = synth_document(0, 0, 32, 32)
        ex = build_masked_image(doc, vocab, TaskConfig(patch=16, ratio_image_patches=0.0), 5)
        assert not ex.patch_mask.any()

    def test_deterministic(self, vocab):
        doc = synth_document(0, 0, 32, 32)
        a = build_masked_image(doc, vocab, TaskConfig(patch=16), 5)
        b = build_masked_image(doc, vocab, TaskConfig(patch=16), 5)
        assert np.array_equal(a.patch_mask, b.patch_mask)


class TestSupervised:
    def test_classification(self, worked_doc, vocab):
        ex = build_supervised(worked_doc, vocab, "classification")
        assert detokenize(ex.target_items, vocab) == "Memo."

    def test_layout_analysis(self, worked_doc, vocab):
        ex = build_supervised(worked_doc, vocab, "layout_analysis")
        assert detokenize(ex.target_items, vocab) == "Paragraph <82><35><150><439>"

    def test_information_extraction(self, worked_doc, vocab):
        ex = build_supervised(worked_doc, vocab, "information_extraction")
        assert detokenize(ex.target_items, vocab) == "Week of March 14, 1994"

    def test_qa(self, worked_doc, vocab):
        ex = build_supervised(worked_doc, vocab, "qa")
        assert detokenize(ex.target_items, vocab) == "1994"
        assert "What is the ship year?" in detokenize(ex.input_items, vocab)

    def test_nli(self, worked_doc, vocab):
        ex = build_supervised(worked_doc, vocab, "nli")
        assert detokenize(ex.target_items, vocab) == "Entailment"

    def test_entity_tagging(self, vocab):
        doc = render_document(
            "funsd",
            [("The", BBox(0.1, 0.1, 0.2, 0.2)), ("Title", BBox(0.2, 0.1, 0.3, 0.2))],
            32, 32,
            labels={"entity_tags": ["I-Header", "I-Header"]},
        )
        ex = build_supervised(doc, vocab, "entity_tagging")
        assert detokenize(ex.input_items, vocab) == "The Title"
        assert detokenize(ex.target_items, vocab) == "The [I-Header] Title [I-Header]"

    def test_ie_with_token_boxes(self, worked_doc, vocab):
        doc = render_document(
            "d", worked_doc.words, 64, 64,
            labels={"query": {
                "text": "Ship", "label": "Header",
                "token_boxes": [[0.2, 0.7, 0.218, 0.744]],
            }},
        )
        ex = build_supervised(doc, vocab, "information_extraction")
        out = detokenize(ex.target_items, vocab)
        assert out.startswith("Header <100><350>")

    def test_missing_annotation(self, vocab):
        doc = render_document("x", [("a", BBox(0.1, 0.1, 0.2, 0.2))], 32, 32)
        with pytest.raises(MissingAnnotationError, match="classification"):
            build_supervised(doc, vocab, "classification")


class TestInvariants:
    def test_builders_parse_cleanly(self, vocab):
        cfg = TaskConfig()
        for seed in range(50):
            doc = synth_document(3, seed % 10, 32, 32)
            for builder in (
                build_joint_text_layout,
                build_layout_modeling,
                build_visual_text_recognition,
            ):
                ex = builder(doc, vocab, cfg, seed)
                if ex.target_items:
                    groups = parse_layout_groups(
                        encode_mixed(ex.target_items), vocab, LayoutQuantizer(vocab.granularity)
                    )
                    ks = [g.sentinel for g in groups if g.sentinel is not None]
                    assert ks == list(range(len(ks)))

    def test_masked_fraction_exact(self, vocab):
        cfg = TaskConfig()
        for seed in range(30):
            doc = synth_document(4, seed % 8, 32, 32)
            m = len(doc.words)
            for builder, ratio in (
                (build_joint_text_layout, cfg.ratio_joint),
                (build_layout_modeling, cfg.ratio_layout),
                (build_visual_text_recognition, cfg.ratio_visual_text),
            ):
                ex = builder(doc, vocab, cfg, seed)
                kept_words = sum(
                    1 for it in ex.input_items
                    if it.kind == "text" and not it.bbox.is_null and it.char_span[0] == 0
                )
                if builder is build_layout_modeling:
                    continue  # masked words stay in the input for this task
                expected_masked = int(np.floor(ratio * m + 0.5))
                assert kept_words == m - expected_masked

    def test_determinism(self, worked_doc, vocab):
        a = build_joint_text_layout(worked_doc, vocab, CFG, 99)
        b = build_joint_text_layout(worked_doc, vocab, CFG, 99)
        assert a.input_items == b.input_items and a.target_items == b.target_items

    def test_example_seed_stable(self):
        assert example_seed(1, "d", "t", 0) == example_seed(1, "d", "t", 0)
        assert example_seed(1, "d", "t", 0) != example_seed(1, "d", "t", 1)
        assert example_seed(1, "d", "joint_text_layout", 0) != example_seed(
            1, "d", "layout_modeling", 0
        )
