from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medico_vqa import dataset_forge as forge
from medico_vqa.dataset_forge import (
    ExplanationSample,
    ExternalMask,
    ImageRecord,
    MultiTaskExample,
    QASample,
    RegionSample,
    TemplateSet,
    assemble_multitask,
    build_region_samples,
    build_visual_cues,
    forge_explanations,
    group_split,
    lookup_answer_text,
    postprocess_explanation,
    read_jsonl,
    region_counts,
    synthesize_explanation,
    update_manifest,
    write_jsonl,
)
from medico_vqa.errors import ConfigError, DatasetError, SampleSkipped
from medico_vqa.gen_clients import MockSegClient, MockTextGenClient
from medico_vqa.imaging import load_mask, save_mask, threshold_mask, union_masks
from medico_vqa.loc_codec import parse_token_text, tokens_to_mask
from medico_vqa.model_adapter import TASK_EXPLAIN, TASK_SEGMENT, TASK_VQA

from conftest import ellipse


def make_qa(sample_id="qa-1", image_id="img1", complexity=1, metadata=None):
    if metadata is None:
        metadata = {"abnormality": "polyp", "location": "colon", "question_type": "size"}
    return QASample(
        sample_id=sample_id,
        image_id=image_id,
        question="What is the size of the polyp?",
        answer="polyp measuring 5 to 10 millimeters",
        complexity=complexity,
        metadata=metadata,
    )


def frame_png(tmp_path, image_id="img1", size=64, dark_corners=True):
    from PIL import Image

    arr = np.full((size, size), 120, dtype=np.uint8)
    if dark_corners:
        arr[:8, :8] = 0
    path = tmp_path / f"{image_id}.png"
    Image.fromarray(arr, mode="L").save(path)
    return path


# ---------------------------------------------------------------------------
# visual cues
# ---------------------------------------------------------------------------


def test_canned_cue_stored_verbatim():
    qa = make_qa()
    templates = TemplateSet.load()
    prompt = templates.cue_user.format(
        question=qa.question, answer=qa.answer, metadata_lines=forge._metadata_lines(qa)
    )
    client = MockTextGenClient(replies={prompt: "a raised pink bump with smooth texture"})
    cue = build_visual_cues(qa, client, templates)
    assert cue.text == "a raised pink bump with smooth texture"
    assert not cue.metadata_missing


def test_cue_prompt_contains_each_field_exactly_once():
    qa = make_qa(metadata={"abnormality": "polyp-x", "location": "cecum-y", "question_type": "size-z"})
    client = MockTextGenClient(fallback=lambda req: "cue")
    build_visual_cues(qa, client)
    prompt = client.requests[0].user_prompt
    assert prompt.count(qa.question) == 1
    assert prompt.count(qa.answer) == 1
    for value in qa.metadata.values():
        assert prompt.count(str(value)) == 1


def test_cue_without_metadata_flagged():
    qa = make_qa(metadata={})
    client = MockTextGenClient(fallback=lambda req: "cue text")
    cue = build_visual_cues(qa, client)
    assert cue.metadata_missing
    assert qa.question in client.requests[0].user_prompt


# ---------------------------------------------------------------------------
# explanation synthesis
# ---------------------------------------------------------------------------


def test_clean_mock_paragraph_passes_through_unchanged():
    qa = make_qa()
    fixed = "The polyp is small and pink. It sits near the center."
    client = MockTextGenClient(fallback=lambda req: fixed)
    sample = synthesize_explanation(qa, "some cues", client, cue_request_id="c1")
    assert sample.explanation == fixed
    assert sample.provenance["cue_request_id"] == "c1"
    assert sample.provenance["synth_request_id"]
    assert sample.provenance["postprocessed"] is False


def test_few_shot_examples_forwarded_in_order():
    qa = make_qa()
    templates = TemplateSet.load()
    client = MockTextGenClient(fallback=lambda req: "fine")
    synthesize_explanation(qa, "cues", client, templates)
    sent = client.requests[0].few_shot_examples
    assert sent == templates.few_shot
    assert len(sent) == 3


def test_complexity_gate():
    qa = make_qa(complexity=2)
    client = MockTextGenClient(fallback=lambda req: "text")
    with pytest.raises(SampleSkipped, match="complexity-1"):
        synthesize_explanation(qa, "cues", client)


def test_forge_explanations_skips_and_sorts():
    samples = [make_qa("qa-b", "img1"), make_qa("qa-a", "img2"), make_qa("qa-c", "img3", complexity=3)]
    client = MockTextGenClient(fallback=lambda req: "An explanation.")
    out, skips = forge_explanations(samples, client)
    assert [s.base.sample_id for s in out] == ["qa-a", "qa-b"]
    assert skips == [{"sample_id": "qa-c", "reason": "explanations target complexity-1 questions"}]


# ---------------------------------------------------------------------------
# post-processing
# ---------------------------------------------------------------------------


def test_postprocess_collapses_whitespace():
    assert postprocess_explanation("The  polyp is  red.") == "The polyp is red."


def test_postprocess_dedups_repeated_sentence():
    assert postprocess_explanation("It is red. It is red.") == "It is red."


def test_postprocess_strips_fences_and_adds_period():
    assert postprocess_explanation("```The polyp is red```") == "The polyp is red."


def test_postprocess_strips_role_label():
    assert postprocess_explanation("Assistant: The polyp is red.") == "The polyp is red."


def test_postprocess_empty_stays_empty():
    assert postprocess_explanation("") == ""
    assert postprocess_explanation("``` ```") == ""


def test_postprocess_keeps_non_adjacent_repeats():
    text = "It is red. It is small. It is red."
    assert postprocess_explanation(text) == text


# ---------------------------------------------------------------------------
# region forging
# ---------------------------------------------------------------------------


def test_pseudo_masks_union_over_prompts(tmp_path):
    image = frame_png(tmp_path, dark_corners=False)
    bumps = {
        "left blob": (16.0, 32.0),
        "right blob": (48.0, 32.0),
    }

    def synth(key, prompt, width, height):
        cx, cy = bumps[prompt]
        ys, xs = np.mgrid[0:height, 0:width]
        return np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * 5.0**2))

    client = MockSegClient(synth=synth)
    rec = ImageRecord("r1", "img1", str(image), "a polyp", "polyp")
    samples, skips = build_region_samples(
        [rec], {"polyp": list(bumps)}, client, [], tmp_path / "out", min_area_frac=0.001
    )
    assert not skips
    (sample,) = samples
    assert sample.category == "pseudo"
    assert sample.prompts_used == tuple(bumps)
    stored = load_mask(tmp_path / "out" / sample.mask_path)
    expected = union_masks(
        [threshold_mask(synth("img1", p, 64, 64), 0.35) for p in bumps]
    )
    assert stored == expected  # the two disjoint blobs are OR-ed


def test_external_mask_passthrough_preserves_category(tmp_path):
    mask = ellipse(64, 64, 32, 32, 20, 14)
    src = tmp_path / "ext.png"
    save_mask(mask, src)
    ext = ExternalMask("e1", "img9", str(src), "instrument", "a metallic tool")
    samples, skips = build_region_samples([], {"polyp": ["x"]}, MockSegClient(), [ext], tmp_path / "out")
    (sample,) = samples
    assert sample.category == "instrument"
    assert not sample.degenerate
    assert load_mask(tmp_path / "out" / sample.mask_path) == mask


def test_unreadable_image_skipped_with_reason(tmp_path):
    rec = ImageRecord("r1", "imgX", str(tmp_path / "missing.png"), "a polyp", "polyp")
    samples, skips = build_region_samples([rec], {"polyp": ["p"]}, MockSegClient(), [], tmp_path / "out")
    assert samples == []
    assert skips[0]["sample_id"] == "r1"
    assert "unreadable image" in skips[0]["reason"]


def test_all_filtered_mask_is_degenerate_but_retained(tmp_path):
    image = frame_png(tmp_path, dark_corners=False)
    client = MockSegClient()  # zero heatmaps everywhere
    rec = ImageRecord("r1", "img1", str(image), "a polyp", "polyp")
    samples, _ = build_region_samples([rec], {"polyp": ["p"]}, client, [], tmp_path / "out")
    (sample,) = samples
    assert sample.degenerate
    assert load_mask(tmp_path / "out" / sample.mask_path).is_empty()


def test_missing_prompt_category_is_config_error(tmp_path):
    image = frame_png(tmp_path)
    rec = ImageRecord("r1", "img1", str(image), "a polyp", "ulcer")
    with pytest.raises(ConfigError, match="ulcer"):
        build_region_samples([rec], {"polyp": ["p"]}, MockSegClient(), [], tmp_path / "out")


def test_region_counts_relation():
    samples = [
        RegionSample("a", "i1", "t", "m.png", "pseudo"),
        RegionSample("b", "i2", "t", "m.png", "polyp"),
        RegionSample("c", "i3", "t", "m.png", "instrument", degenerate=False),
    ]
    counts = region_counts(samples)
    assert counts["pseudo_count"] + counts["external_count"] == counts["region_total"] == 3


def test_region_category_validated():
    with pytest.raises(ValueError):
        RegionSample("a", "i", "t", "m.png", "landmark")


def test_lookup_answer_text_unique_and_ambiguous():
    qa1 = make_qa("qa-1", "img1")
    qa2 = make_qa("qa-2", "img1")
    answer, reason = lookup_answer_text([qa1], "img1", "size")
    assert answer == qa1.answer and reason is None
    answer, reason = lookup_answer_text([qa1, qa2], "img1", "size")
    assert answer is None and "ambiguous" in reason
    answer, reason = lookup_answer_text([qa1], "img2", "size")
    assert answer is None and "no QA pair" in reason


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------


def assembled_fixture(tmp_path):
    image_path = frame_png(tmp_path, "img1")
    qa = make_qa()
    expl = ExplanationSample(base=qa, visual_cues="cues", explanation="Because it is visibly small.")
    mask = ellipse(64, 64, 30, 30, 15, 11)
    save_mask(mask, tmp_path / "masks" / "r1.png")
    region = RegionSample("r1", "img1", qa.answer, "masks/r1.png", "pseudo")
    return qa, expl, region, mask, {"img1": image_path}


def test_assemble_emits_three_task_tokens(tmp_path):
    qa, expl, region, mask, images = assembled_fixture(tmp_path)
    examples, counts = assemble_multitask([qa], [expl], [region], images, mask_base_dir=tmp_path)
    assert [e.task_token for e in examples] == [TASK_VQA, TASK_EXPLAIN, TASK_SEGMENT]
    assert counts == {"vqa": 1, "explanation": 1, "region": 1,
                      "region_degenerate_excluded": 0, "total": 3}
    vqa_ex, expl_ex, seg_ex = examples
    assert vqa_ex.input_text == qa.question
    assert vqa_ex.target_text == qa.answer
    assert expl_ex.input_text == f"{qa.question} Explain in detail"
    assert seg_ex.input_text == qa.answer


def test_assemble_region_target_round_trips(tmp_path):
    qa, expl, region, mask, images = assembled_fixture(tmp_path)
    examples, _ = assemble_multitask([qa], [expl], [region], images, mask_base_dir=tmp_path)
    seg_ex = [e for e in examples if e.task_token == TASK_SEGMENT][0]
    seq = parse_token_text(seg_ex.target_text)
    from medico_vqa.imaging import iou

    assert iou(tokens_to_mask(seq, 64, 64), mask) >= 0.90


def test_assemble_excludes_degenerate_regions(tmp_path):
    qa, expl, region, mask, images = assembled_fixture(tmp_path)
    save_mask(ellipse(64, 64, 1, 1, 0.1, 0.1), tmp_path / "masks" / "r2.png")
    degenerate = RegionSample("r2", "img1", qa.answer, "masks/r2.png", "pseudo", degenerate=True)
    examples, counts = assemble_multitask([qa], [expl], [region, degenerate], images, mask_base_dir=tmp_path)
    assert counts["region_degenerate_excluded"] == 1
    assert sum(1 for e in examples if e.task_token == TASK_SEGMENT) == 1


def test_assemble_missing_image_lists_ids(tmp_path):
    qa, expl, region, mask, images = assembled_fixture(tmp_path)
    with pytest.raises(DatasetError, match="img1"):
        assemble_multitask([qa], [expl], [region], {}, mask_base_dir=tmp_path)


def test_explain_suffix_not_duplicated(tmp_path):
    qa, expl, region, mask, images = assembled_fixture(tmp_path)
    already = QASample("qa-s", "img1", "Describe it. Explain in detail", "fine", 1, {})
    expl2 = ExplanationSample(base=already, visual_cues="c", explanation="Done.")
    examples, _ = assemble_multitask([], [expl2], [], images)
    assert examples[0].input_text == "Describe it. Explain in detail"


def test_assemble_output_sorted_deterministically(tmp_path):
    qa, expl, region, mask, images = assembled_fixture(tmp_path)
    qa2 = make_qa("qa-0", "img1")
    examples, _ = assemble_multitask([qa, qa2], [], [], images)
    assert [e.task_token for e in examples] == [TASK_VQA, TASK_VQA]
    assert examples[0].target_text == qa2.answer  # qa-0 sorts before qa-1


# ---------------------------------------------------------------------------
# group split
# ---------------------------------------------------------------------------


def examples_for_ids(ids, per_id=2):
    return [
        MultiTaskExample(TASK_VQA, image_id, f"q{i}", "a", "vqa")
        for image_id in ids
        for i in range(per_id)
    ]


def test_group_split_example():
    examples = examples_for_ids([f"img{i}" for i in range(10)])
    train, val = group_split(examples, ratio=0.8, seed=0)
    train_ids = {e.image_id for e in train}
    val_ids = {e.image_id for e in val}
    assert len(train_ids) == 8 and len(val_ids) == 2
    assert len(train) == 16 and len(val) == 4
    assert not (train_ids & val_ids)


def test_group_split_deterministic():
    examples = examples_for_ids([f"img{i}" for i in range(10)])
    assert group_split(examples, 0.8, seed=7) == group_split(examples, 0.8, seed=7)
    assert group_split(examples, 0.8, seed=7) != group_split(examples, 0.8, seed=8)


def test_group_split_empty_validation_is_error():
    examples = examples_for_ids([f"img{i}" for i in range(10)])
    with pytest.raises(DatasetError, match="validation"):
        group_split(examples, ratio=0.999, seed=0)


def test_group_split_needs_two_ids():
    with pytest.raises(DatasetError, match=">= 2"):
        group_split(examples_for_ids(["only"]), 0.8, 0)


@given(st.integers(0, 2**31 - 1), st.integers(5, 60))
@settings(max_examples=40, deadline=None)
def test_group_split_never_overlaps(seed, n_ids):
    examples = examples_for_ids([f"img{i}" for i in range(n_ids)], per_id=1 + seed % 3)
    train, val = group_split(examples, 0.8, seed)
    assert not ({e.image_id for e in train} & {e.image_id for e in val})
    assert len(train) + len(val) == len(examples)


# ---------------------------------------------------------------------------
# idempotence and file plumbing
# ---------------------------------------------------------------------------


def test_forge_outputs_are_byte_identical_across_reruns(tmp_path):
    qa_samples = [make_qa(f"qa-{i}", f"img{i}") for i in range(3)]

    def run(out_dir):
        client = MockTextGenClient(fallback=lambda req: "A stable explanation.")
        samples, _ = forge_explanations(qa_samples, client)
        return write_jsonl(out_dir / "explanations.jsonl", [s.to_record() for s in samples]).read_bytes()

    assert run(tmp_path / "a") == run(tmp_path / "b")


def test_jsonl_round_trip(tmp_path):
    records = [{"b": 1, "a": [1, 2]}, {"a": "x", "b": None}]
    path = write_jsonl(tmp_path / "x.jsonl", records)
    assert read_jsonl(path) == records


def test_read_jsonl_reports_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"ok": 1}\nnot json\n', encoding="utf-8")
    with pytest.raises(DatasetError, match="line 2"):
        read_jsonl(path)


def test_update_manifest_merges_sections(tmp_path):
    path = tmp_path / "manifest.json"
    update_manifest(path, "regions", {"counts": {"region_total": 3}})
    manifest = update_manifest(path, "split", {"seed": 5})
    assert manifest["regions"]["counts"]["region_total"] == 3
    assert json.loads(path.read_text())["split"]["seed"] == 5


def test_forge_explanations_parallel_matches_serial():
    qa_samples = [make_qa(f"qa-{i}", f"img{i}") for i in range(6)]

    def run(workers):
        client = MockTextGenClient(fallback=lambda req: "A stable explanation.")
        samples, skips = forge_explanations(qa_samples, client, max_workers=workers)
        return [s.to_record() for s in samples], skips

    assert run(1) == run(4)


def test_build_region_samples_parallel_matches_serial(tmp_path):
    image = frame_png(tmp_path, dark_corners=False)
    records = [ImageRecord(f"r{i}", "img1", str(image), "a polyp", "polyp") for i in range(6)]

    def synth(key, prompt, width, height):
        ys, xs = np.mgrid[0:height, 0:width]
        return np.exp(-((xs - 32.0) ** 2 + (ys - 32.0) ** 2) / (2 * 6.0**2))

    def run(workers, out):
        samples, _ = build_region_samples(
            records, {"polyp": ["p"]}, MockSegClient(synth=synth), [], out, max_workers=workers
        )
        return [s.to_record() for s in samples]

    assert run(1, tmp_path / "a") == run(4, tmp_path / "b")


def test_duplicate_sample_ids_rejected():
    from medico_vqa.dataset_forge import ensure_unique_sample_ids

    records = [{"sample_id": "a"}, {"sample_id": "b"}, {"sample_id": "a"}]
    with pytest.raises(DatasetError, match="duplicate sample ids \\['a'\\]"):
        ensure_unique_sample_ids(records, "qa")
    assert ensure_unique_sample_ids(records[:2], "qa") == records[:2]
