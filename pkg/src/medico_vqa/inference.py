"""Subtask drivers: plain VQA and the two-step grounded pipeline.

Subtask 1 answers the question directly. Subtask 2 first predicts the
answer, then localizes the region supporting it (the predicted answer is
the referring expression), then generates an explanation whose decoding
trace yields a confidence score: the average top-k (k=5) probability mass
across the generated steps. Grounding failures are soft (the mask is simply
absent); an explanation is still produced.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .errors import ContractError, GenerationError, TokenParseError
from .imaging import BinaryMask
from .loc_codec import parse_token_text, tokens_to_mask
from .model_adapter import (
    EXPLAIN_PROMPT,
    TASK_EXPLAIN,
    TASK_SEGMENT,
    TASK_VQA,
    DecodingTrace,
    generate,
)

logger = logging.getLogger(__name__)

CONFIDENCE_K = 5


@dataclass
class GroundedAnswer:
    """Output of the two-step pipeline for one question.

    ``confidence`` is present exactly when ``explanation`` is; the mask is
    absent when grounding found no parseable region (or a later stage never
    ran, see ``failure_stage``). ``traces`` maps stage name -> DecodingTrace
    for exactly the stages that executed.
    """

    question: str
    answer: str
    mask: BinaryMask | None = None
    explanation: str | None = None
    confidence: float | None = None
    traces: dict = field(default_factory=dict)
    failure_stage: str | None = None


def answer_question(adapter, image, question: str) -> tuple[str, DecodingTrace]:
    """Subtask 1: generate with the VQA token and the question as input."""
    if not question or not question.strip():
        raise ContractError("question must be non-empty")
    result = generate(adapter, image, TASK_VQA, question, top_k_record=CONFIDENCE_K)
    return result.text, result.trace


def _ground_with_trace(
    adapter, image, answer_text: str, dims: tuple[int, int]
) -> tuple[BinaryMask | None, DecodingTrace]:
    if not answer_text or not answer_text.strip():
        raise ContractError("answer_text must be non-empty")
    result = generate(adapter, image, TASK_SEGMENT, answer_text, top_k_record=CONFIDENCE_K)
    width, height = dims
    try:
        seq = parse_token_text(result.text)
    except TokenParseError as exc:
        logger.warning("grounding produced no usable region: %s", exc)
        return None, result.trace
    return tokens_to_mask(seq, width, height), result.trace


def ground_answer(adapter, image, answer_text: str, dims: tuple[int, int]) -> BinaryMask | None:
    """Localize the region supporting an answer; None when nothing parses.

    ``dims`` is (width, height) of the target frame. Only hard generation
    failures raise; unparseable output (no location tokens, out-of-range
    bins) degrades to None with a warning.
    """
    mask, _ = _ground_with_trace(adapter, image, answer_text, dims)
    return mask


def explain(adapter, image, question: str, k: int = CONFIDENCE_K) -> tuple[str, DecodingTrace]:
    """Generate an explanation: question + the "Explain in detail" prompt."""
    if not question or not question.strip():
        raise ContractError("question must be non-empty")
    prompt = question if question.rstrip().endswith(EXPLAIN_PROMPT) else f"{question} {EXPLAIN_PROMPT}"
    result = generate(adapter, image, TASK_EXPLAIN, prompt, top_k_record=k)
    return result.text, result.trace


def confidence(trace: DecodingTrace, k: int = CONFIDENCE_K, mode: str = "topk_mass") -> float:
    """Decoding-stability score from a trace.

    ``topk_mass`` (default): mean over steps of the summed top-k
    probabilities. ``top1``: mean over steps of the top probability alone,
    kept for comparison since the two readings order some traces
    differently.
    """
    if len(trace) == 0:
        raise ValueError("confidence needs a non-empty trace")
    if mode not in ("topk_mass", "top1"):
        raise ValueError(f"unknown confidence mode {mode!r}")
    need = k if mode == "topk_mass" else 1
    for i, step in enumerate(trace.steps):
        if len(step) < need:
            raise ValueError(f"step {i} records {len(step)} entries, confidence needs >= {need}")
    if mode == "top1":
        total = sum(step[0][1] for step in trace.steps)
    else:
        total = sum(sum(p for _, p in step[:k]) for step in trace.steps)
    return total / len(trace)


def run_subtask2(
    adapter, image, question: str, dims: tuple[int, int], confidence_mode: str = "topk_mass"
) -> GroundedAnswer:
    """Answer, then ground the answer, then explain with a confidence score.

    Stage order is fixed. A hard failure in the answer stage raises; a hard
    failure later records the failing stage and skips what follows, leaving
    a partial result. Grounding that merely finds no region is not a
    failure: the explanation is still generated.
    """
    answer, answer_trace = answer_question(adapter, image, question)
    out = GroundedAnswer(question=question, answer=answer, traces={"answer": answer_trace})

    try:
        mask, ground_trace = _ground_with_trace(adapter, image, answer, dims)
    except (GenerationError, ContractError) as exc:
        logger.warning("grounding stage failed hard: %s", exc)
        out.failure_stage = "ground"
        return out
    out.mask = mask
    out.traces["ground"] = ground_trace

    try:
        explanation, expl_trace = explain(adapter, image, question)
    except (GenerationError, ContractError) as exc:
        logger.warning("explanation stage failed hard: %s", exc)
        out.failure_stage = "explain"
        return out
    out.explanation = explanation
    out.traces["explain"] = expl_trace
    # the score qualifies the explanation, so only its trace contributes
    out.confidence = confidence(expl_trace, mode=confidence_mode)
    return out


def prediction_record(
    sample_id: str, result: GroundedAnswer, mask_path: str | None = None
) -> dict:
    """One predictions.jsonl line; optional fields are omitted, not null."""
    rec = {"sample_id": sample_id, "question": result.question, "answer": result.answer}
    if mask_path is not None:
        rec["mask_path"] = mask_path
    if result.explanation is not None:
        rec["explanation"] = result.explanation
    if result.confidence is not None:
        rec["confidence"] = result.confidence
    if result.failure_stage is not None:
        rec["failure_stage"] = result.failure_stage
    return rec
