"""Curate the explanation and text-to-region datasets and assemble the
combined multi-task training set.

Three record kinds flow through here: QA pairs (ingested), synthesized
explanations (visual cues then few-shot synthesis, both through a text
client), and region samples (per-prompt heatmaps thresholded, unioned and
refined into pseudo-masks, plus externally annotated masks normalized to
the same PNG convention). Assembly stamps each record with its task token
and the split keeps all samples of an image on one side.

Forge runs are idempotent: same inputs, seed and mock clients give
byte-identical JSONL outputs, because every writer sorts its records and
serializes canonically.
"""

from __future__ import annotations

import json
import logging
import math
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, DatasetError, SampleSkipped
from .gen_clients import SegRequest, TextGenRequest, generate_text, segment_by_text
from .imaging import (
    load_grayscale,
    load_mask,
    refine_mask,
    remove_black_border_components,
    save_mask,
    threshold_mask,
    union_masks,
)
from .loc_codec import mask_to_tokens, parse_token_text, render_token_text
from .model_adapter import EXPLAIN_PROMPT, TASK_EXPLAIN, TASK_SEGMENT, TASK_TOKENS, TASK_VQA

logger = logging.getLogger(__name__)

REGION_CATEGORIES = ("instrument", "polyp", "pseudo")
MASK_SUBDIR = "masks"


def _field(rec: dict, key: str):
    try:
        return rec[key]
    except KeyError:
        raise DatasetError(f"record missing required field {key!r}: {rec}") from None


# ---------------------------------------------------------------------------
# record types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QASample:
    sample_id: str
    image_id: str
    question: str
    answer: str
    complexity: int = 1
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.sample_id or not self.question or not self.answer:
            raise ValueError("sample_id, question and answer must be non-empty")
        if self.complexity < 1:
            raise ValueError(f"complexity must be >= 1, got {self.complexity}")

    def to_record(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "image_id": self.image_id,
            "question": self.question,
            "answer": self.answer,
            "complexity": self.complexity,
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "QASample":
        return cls(
            sample_id=_field(rec, "sample_id"),
            image_id=_field(rec, "image_id"),
            question=_field(rec, "question"),
            answer=_field(rec, "answer"),
            complexity=int(rec.get("complexity", 1)),
            metadata=dict(rec.get("metadata", {})),
        )


@dataclass(frozen=True)
class ExplanationSample:
    base: QASample
    visual_cues: str
    explanation: str
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.explanation:
            raise ValueError("explanation must be non-empty")

    def to_record(self) -> dict:
        return {
            "sample_id": self.base.sample_id,
            "image_id": self.base.image_id,
            "question": self.base.question,
            "answer": self.base.answer,
            "visual_cues": self.visual_cues,
            "explanation": self.explanation,
            "provenance": dict(self.provenance),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ExplanationSample":
        base = QASample(
            sample_id=_field(rec, "sample_id"),
            image_id=_field(rec, "image_id"),
            question=_field(rec, "question"),
            answer=_field(rec, "answer"),
        )
        return cls(
            base=base,
            visual_cues=rec.get("visual_cues", ""),
            explanation=_field(rec, "explanation"),
            provenance=dict(rec.get("provenance", {})),
        )


@dataclass(frozen=True)
class RegionSample:
    sample_id: str
    image_id: str
    answer_text: str
    mask_path: str
    category: str
    prompts_used: tuple[str, ...] = ()
    degenerate: bool = False

    def __post_init__(self):
        if self.category not in REGION_CATEGORIES:
            raise ValueError(f"category must be one of {REGION_CATEGORIES}, got {self.category!r}")
        object.__setattr__(self, "prompts_used", tuple(self.prompts_used))

    def to_record(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "image_id": self.image_id,
            "answer_text": self.answer_text,
            "mask_path": self.mask_path,
            "category": self.category,
            "prompts_used": list(self.prompts_used),
            "degenerate": self.degenerate,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "RegionSample":
        return cls(
            sample_id=_field(rec, "sample_id"),
            image_id=_field(rec, "image_id"),
            answer_text=_field(rec, "answer_text"),
            mask_path=_field(rec, "mask_path"),
            category=_field(rec, "category"),
            prompts_used=tuple(rec.get("prompts_used", [])),
            degenerate=bool(rec.get("degenerate", False)),
        )


@dataclass(frozen=True)
class MultiTaskExample:
    task_token: str
    image_id: str
    input_text: str
    target_text: str
    source: str  # vqa | explanation | region

    def __post_init__(self):
        if self.task_token not in TASK_TOKENS:
            raise ValueError(f"unknown task token {self.task_token!r}")
        if self.source not in ("vqa", "explanation", "region"):
            raise ValueError(f"unknown source {self.source!r}")

    def to_record(self) -> dict:
        return {
            "task_token": self.task_token,
            "image_id": self.image_id,
            "input_text": self.input_text,
            "target_text": self.target_text,
            "source": self.source,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "MultiTaskExample":
        return cls(
            task_token=_field(rec, "task_token"),
            image_id=_field(rec, "image_id"),
            input_text=_field(rec, "input_text"),
            target_text=_field(rec, "target_text"),
            source=_field(rec, "source"),
        )


@dataclass(frozen=True)
class ImageRecord:
    """One pseudo-mask work item: image plus the answer it grounds."""

    sample_id: str
    image_id: str
    image_path: str
    answer_text: str
    answer_category: str


@dataclass(frozen=True)
class ExternalMask:
    """An externally annotated mask (polyp or instrument) to pass through."""

    sample_id: str
    image_id: str
    mask_path: str
    category: str
    answer_text: str


@dataclass(frozen=True)
class CueResult:
    text: str
    request_id: str
    metadata_missing: bool


# ---------------------------------------------------------------------------
# templates
# ---------------------------------------------------------------------------

_TEMPLATE_DIR = Path(__file__).parent / "templates"


@dataclass(frozen=True)
class TemplateSet:
    """Editable prompt templates; the shipped defaults live in templates/."""

    cue_system: str
    cue_user: str
    explain_system: str
    explain_user: str
    few_shot: tuple[tuple[str, str], ...]
    region_prompts: dict

    @classmethod
    def load(cls, directory: str | Path | None = None) -> "TemplateSet":
        d = Path(directory) if directory else _TEMPLATE_DIR
        few_shot = tuple(
            (pair[0], pair[1]) for pair in json.loads((d / "few_shot.json").read_text(encoding="utf-8"))
        )
        return cls(
            cue_system=(d / "cue_system.txt").read_text(encoding="utf-8").strip(),
            cue_user=(d / "cue_user.txt").read_text(encoding="utf-8").strip(),
            explain_system=(d / "explain_system.txt").read_text(encoding="utf-8").strip(),
            explain_user=(d / "explain_user.txt").read_text(encoding="utf-8").strip(),
            few_shot=few_shot,
            region_prompts=json.loads((d / "region_prompts.json").read_text(encoding="utf-8")),
        )


def _metadata_lines(qa: QASample) -> str:
    if not qa.metadata:
        return "(no metadata available)"
    return "\n".join(f"- {k}: {qa.metadata[k]}" for k in sorted(qa.metadata))


# ---------------------------------------------------------------------------
# explanation forging
# ---------------------------------------------------------------------------


def build_visual_cues(qa: QASample, textgen_client, templates: TemplateSet | None = None) -> CueResult:
    """Ask the text service for plain-language observable cues for one QA pair.

    The template tells the generator to stick to observable features (shape,
    texture, color) and avoid medical terminology. Samples without metadata
    still get a prompt, flagged ``metadata_missing``.
    """
    templates = templates or TemplateSet.load()
    metadata_missing = not qa.metadata
    user_prompt = templates.cue_user.format(
        question=qa.question, answer=qa.answer, metadata_lines=_metadata_lines(qa)
    )
    if metadata_missing:
        logger.info("sample %s: no metadata, cue prompt built from QA text only", qa.sample_id)
    result = generate_text(
        textgen_client,
        TextGenRequest(system_prompt=templates.cue_system, user_prompt=user_prompt, max_tokens=256),
    )
    return CueResult(text=result.text.strip(), request_id=result.request_id, metadata_missing=metadata_missing)


def synthesize_explanation(
    qa: QASample,
    cues: str,
    textgen_client,
    templates: TemplateSet | None = None,
    cue_request_id: str | None = None,
) -> ExplanationSample:
    """Few-shot synthesis of a complete explanation from QA + metadata + cues.

    Only complexity-1 questions are explanation-worthy; anything else raises
    :class:`SampleSkipped` so the driver can log the reason and move on.
    """
    if qa.complexity != 1:
        raise SampleSkipped("explanations target complexity-1 questions")
    if not cues:
        raise ValueError("cues must be non-empty")
    templates = templates or TemplateSet.load()
    user_prompt = templates.explain_user.format(
        question=qa.question, answer=qa.answer, cues=cues, metadata_lines=_metadata_lines(qa)
    )
    result = generate_text(
        textgen_client,
        TextGenRequest(
            system_prompt=templates.explain_system,
            user_prompt=user_prompt,
            few_shot_examples=templates.few_shot,
            max_tokens=512,
        ),
    )
    explanation = postprocess_explanation(result.text)
    return ExplanationSample(
        base=qa,
        visual_cues=cues,
        explanation=explanation,
        provenance={
            "cue_request_id": cue_request_id,
            "synth_request_id": result.request_id,
            "postprocessed": explanation != result.text,
        },
    )


_FENCE_RE = re.compile(r"^\s*```(?:[a-zA-Z0-9_+-]*\n)?|\s*```\s*$")
_ROLE_LABEL_RE = re.compile(r"^(assistant|answer|explanation|response|output)\s*:\s*", re.IGNORECASE)
_SENTENCE_RE = re.compile(r"[^.!?]+[.!?]*\s*")


def postprocess_explanation(text: str) -> str:
    """Fluency cleanup for generated explanations.

    Strips code fences and leading role labels, collapses repeated
    whitespace, drops immediately repeated sentences, and guarantees
    terminal punctuation. Empty input stays empty.
    """
    text = _FENCE_RE.sub("", text)
    text = _ROLE_LABEL_RE.sub("", text.strip())
    text = re.sub(r"\s+", " ", text).strip()
    if not text:
        return ""
    sentences = [s for s in _SENTENCE_RE.findall(text) if s.strip()]
    kept: list[str] = []
    for sentence in sentences:
        normalized = re.sub(r"[\s.!?]+$", "", sentence).casefold()
        prev = re.sub(r"[\s.!?]+$", "", kept[-1]).casefold() if kept else None
        if normalized and normalized == prev:
            continue
        kept.append(sentence)
    text = "".join(kept).strip()
    if text and text[-1] not in ".!?":
        text += "."
    return text


def forge_explanations(
    qa_samples: list[QASample],
    textgen_client,
    templates: TemplateSet | None = None,
    max_workers: int = 1,
) -> tuple[list[ExplanationSample], list[dict]]:
    """Cue + synthesis for every explanation-worthy QA sample.

    Returns (samples, skip records); skip records carry the sample id and
    the reason. Workers only parallelize the client calls; output order is
    the deterministic sorted order regardless of worker count.
    """
    templates = templates or TemplateSet.load()

    def forge_one(qa: QASample):
        if qa.complexity != 1:
            return ("skip", {"sample_id": qa.sample_id, "reason": "explanations target complexity-1 questions"})
        cue = build_visual_cues(qa, textgen_client, templates)
        sample = synthesize_explanation(qa, cue.text, textgen_client, templates, cue_request_id=cue.request_id)
        return ("ok", sample)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            outcomes = list(pool.map(forge_one, qa_samples))
    else:
        outcomes = [forge_one(qa) for qa in qa_samples]

    samples = [payload for kind, payload in outcomes if kind == "ok"]
    skips = [payload for kind, payload in outcomes if kind == "skip"]
    samples.sort(key=lambda s: s.base.sample_id)
    skips.sort(key=lambda s: s["sample_id"])
    for skip in skips:
        logger.info("skipped %s: %s", skip["sample_id"], skip["reason"])
    return samples, skips


# ---------------------------------------------------------------------------
# region forging
# ---------------------------------------------------------------------------


def lookup_answer_text(
    qa_samples: list[QASample], image_id: str, question_type: str
) -> tuple[str | None, str | None]:
    """Match a mask to its QA answer via (image_id, question_type).

    Returns (answer, None) on a unique match, otherwise (None, reason):
    multiple QA pairs sharing an image are flagged ambiguous rather than
    guessed at.
    """
    matches = [
        qa
        for qa in qa_samples
        if qa.image_id == image_id and qa.metadata.get("question_type") == question_type
    ]
    if len(matches) == 1:
        return matches[0].answer, None
    if not matches:
        return None, f"no QA pair on image {image_id} with question_type {question_type!r}"
    return None, f"ambiguous: {len(matches)} QA pairs on image {image_id} match question_type {question_type!r}"


def build_region_samples(
    images: list[ImageRecord],
    prompt_table: dict,
    seg_client,
    external_masks: list[ExternalMask],
    out_dir: str | Path,
    *,
    heatmap_thresh: float = 0.35,
    min_area_frac: float = 0.01,
    connectivity: int = 8,
    black_border_max_intensity: float = 10.0,
    max_workers: int = 1,
) -> tuple[list[RegionSample], list[dict]]:
    """Build the text-to-region dataset.

    Pseudo cases run every prompt for the answer category through the
    segmentation client, threshold each heatmap, union them, drop
    near-black border components, and area-filter the rest. External masks
    pass through untouched except for PNG normalization. Mask files land in
    ``out_dir/masks/``; stored paths are relative to ``out_dir``.

    A refined-to-empty pseudo-mask is retained with ``degenerate=True``
    (assembly excludes it); unreadable inputs are skipped with a logged
    reason.
    """
    out_dir = Path(out_dir)
    mask_dir = out_dir / MASK_SUBDIR
    mask_dir.mkdir(parents=True, exist_ok=True)

    for rec in images:
        if not prompt_table.get(rec.answer_category):
            raise ConfigError(f"prompt table has no prompts for category {rec.answer_category!r}")

    def forge_pseudo(rec: ImageRecord):
        try:
            gray = load_grayscale(rec.image_path)
        except (OSError, ValueError) as exc:
            logger.warning("skipping %s: unreadable image %s (%s)", rec.sample_id, rec.image_path, exc)
            return ("skip", {"sample_id": rec.sample_id, "reason": f"unreadable image: {exc}"})
        prompts = list(prompt_table[rec.answer_category])
        per_prompt = [
            threshold_mask(segment_by_text(seg_client, SegRequest(rec.image_path, prompt)), heatmap_thresh)
            for prompt in prompts
        ]
        combined = union_masks(per_prompt)
        combined = remove_black_border_components(combined, gray, black_border_max_intensity)
        refined = refine_mask(combined, min_area_frac, connectivity)
        rel_path = f"{MASK_SUBDIR}/{rec.sample_id}.png"
        save_mask(refined, out_dir / rel_path)
        return (
            "ok",
            RegionSample(
                sample_id=rec.sample_id,
                image_id=rec.image_id,
                answer_text=rec.answer_text,
                mask_path=rel_path,
                category="pseudo",
                prompts_used=tuple(prompts),
                degenerate=refined.is_empty(),
            ),
        )

    def forge_external(rec: ExternalMask):
        try:
            mask = load_mask(rec.mask_path)
        except (OSError, ValueError) as exc:
            logger.warning("skipping %s: unreadable mask %s (%s)", rec.sample_id, rec.mask_path, exc)
            return ("skip", {"sample_id": rec.sample_id, "reason": f"unreadable mask: {exc}"})
        rel_path = f"{MASK_SUBDIR}/{rec.sample_id}.png"
        save_mask(mask, out_dir / rel_path)
        return (
            "ok",
            RegionSample(
                sample_id=rec.sample_id,
                image_id=rec.image_id,
                answer_text=rec.answer_text,
                mask_path=rel_path,
                category=rec.category,
                prompts_used=(),
                degenerate=mask.is_empty(),
            ),
        )

    jobs = [(forge_pseudo, rec) for rec in images] + [(forge_external, rec) for rec in external_masks]
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            outcomes = list(pool.map(lambda job: job[0](job[1]), jobs))
    else:
        outcomes = [fn(rec) for fn, rec in jobs]

    samples = sorted((p for kind, p in outcomes if kind == "ok"), key=lambda s: s.sample_id)
    skips = sorted((p for kind, p in outcomes if kind == "skip"), key=lambda s: s["sample_id"])
    return samples, skips


def region_counts(samples: list[RegionSample]) -> dict:
    """Manifest counts; pseudo + external must equal the total."""
    pseudo = sum(1 for s in samples if s.category == "pseudo")
    external = len(samples) - pseudo
    counts = {
        "pseudo_count": pseudo,
        "external_count": external,
        "region_total": len(samples),
        "degenerate_count": sum(1 for s in samples if s.degenerate),
    }
    if counts["pseudo_count"] + counts["external_count"] != counts["region_total"]:
        raise DatasetError("region manifest inconsistent: pseudo + external != total")
    return counts


# ---------------------------------------------------------------------------
# multi-task assembly and split
# ---------------------------------------------------------------------------


def _explain_input(question: str) -> str:
    if question.rstrip().endswith(EXPLAIN_PROMPT):
        return question
    return f"{question} {EXPLAIN_PROMPT}"


def assemble_multitask(
    vqa: list[QASample],
    explanations: list[ExplanationSample],
    regions: list[RegionSample],
    image_paths: dict,
    *,
    simplify_eps: float = 0.0,
    num_bins: int = 1000,
    mask_base_dir: str | Path | None = None,
) -> tuple[list[MultiTaskExample], dict]:
    """Stamp every record with its task token and emit a deterministic list.

    VQA keeps question -> answer; explanations get the "Explain in detail"
    prompt suffix; region samples are re-encoded as location-token text.
    Degenerate regions are excluded (counted in the manifest). All
    referenced images must exist up front.
    """
    referenced = sorted(
        {s.image_id for s in vqa}
        | {s.base.image_id for s in explanations}
        | {s.image_id for s in regions if not s.degenerate}
    )
    missing = [
        img_id
        for img_id in referenced
        if img_id not in image_paths or not Path(image_paths[img_id]).is_file()
    ]
    if missing:
        raise DatasetError(f"missing image files for ids: {missing}")

    base = Path(mask_base_dir) if mask_base_dir else Path(".")
    keyed: list[tuple[tuple[str, str], MultiTaskExample]] = []
    for qa in vqa:
        keyed.append(
            (
                (TASK_VQA, qa.sample_id),
                MultiTaskExample(TASK_VQA, qa.image_id, qa.question, qa.answer, "vqa"),
            )
        )
    for expl in explanations:
        keyed.append(
            (
                (TASK_EXPLAIN, expl.base.sample_id),
                MultiTaskExample(
                    TASK_EXPLAIN,
                    expl.base.image_id,
                    _explain_input(expl.base.question),
                    expl.explanation,
                    "explanation",
                ),
            )
        )
    degenerate_excluded = 0
    for region in regions:
        if region.degenerate:
            degenerate_excluded += 1
            continue
        mask = load_mask(base / region.mask_path)
        target = render_token_text(mask_to_tokens(mask, simplify_eps, num_bins))
        parse_token_text(target, num_bins)  # every emitted target must parse back
        keyed.append(
            (
                (TASK_SEGMENT, region.sample_id),
                MultiTaskExample(TASK_SEGMENT, region.image_id, region.answer_text, target, "region"),
            )
        )
    keyed.sort(key=lambda item: item[0])
    examples = [ex for _, ex in keyed]
    counts = {
        "vqa": len(vqa),
        "explanation": len(explanations),
        "region": len(regions) - degenerate_excluded,
        "region_degenerate_excluded": degenerate_excluded,
        "total": len(examples),
    }
    return examples, counts


def group_split(
    examples: list[MultiTaskExample], ratio: float = 0.8, seed: int = 0
) -> tuple[list[MultiTaskExample], list[MultiTaskExample]]:
    """Split at the image level so no image straddles train and validation.

    Unique image ids are shuffled with the seeded RNG and the first
    ceil(ratio * n) go to train. Deterministic given the seed.
    """
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    ids = sorted({ex.image_id for ex in examples})
    if len(ids) < 2:
        raise DatasetError(f"group split needs >= 2 unique image ids, got {len(ids)}")
    rng = random.Random(seed)
    rng.shuffle(ids)
    n_train = math.ceil(ratio * len(ids))
    if n_train >= len(ids):
        raise DatasetError(f"validation split is empty: ceil({ratio} * {len(ids)}) = {n_train}")
    train_ids = set(ids[:n_train])
    train = [ex for ex in examples if ex.image_id in train_ids]
    val = [ex for ex in examples if ex.image_id not in train_ids]
    return train, val


# ---------------------------------------------------------------------------
# JSONL + manifest plumbing
# ---------------------------------------------------------------------------


def ensure_unique_sample_ids(records: list[dict], what: str) -> list[dict]:
    """Reject datasets with duplicate sample ids; returns the records."""
    seen: dict[str, int] = {}
    for rec in records:
        sid = rec.get("sample_id")
        if sid is not None:
            seen[sid] = seen.get(sid, 0) + 1
    duplicates = sorted(sid for sid, n in seen.items() if n > 1)
    if duplicates:
        raise DatasetError(f"{what}: duplicate sample ids {duplicates}")
    return records


def write_jsonl(path: str | Path, records: list[dict]) -> Path:
    """Canonical JSONL: one sorted-key JSON object per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")
    return path


def read_jsonl(path: str | Path) -> list[dict]:
    records = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
    return records


def update_manifest(path: str | Path, section: str, data: dict) -> dict:
    """Merge one stage's counts/seed/config-hash into manifest.json."""
    path = Path(path)
    manifest = json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}
    manifest[section] = data
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    return manifest
