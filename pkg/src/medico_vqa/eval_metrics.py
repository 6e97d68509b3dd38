"""Validation-score suite: BLEU, ROUGE-1/2/L, METEOR (exact-match variant),
CHRF++, and per-category Seg-IoU, plus report assembly and radar-chart data.

All text metrics share one deterministic tokenizer: lowercase, punctuation
split into separate tokens, whitespace-delimited. The METEOR here does
exact unigram matching only (no stemming or synonyms) and is reported as
``meteor_exact``; the explainability judge metrics are never computed
locally, only ingested.
"""

from __future__ import annotations

import csv
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from math import exp, log
from pathlib import Path
from typing import NamedTuple

from .dataset_forge import ensure_unique_sample_ids, read_jsonl
from .errors import DatasetError
from .imaging import iou, load_mask

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")

SEG_CATEGORIES = ("instrument", "polyp", "pseudo")


def tokenize(text: str) -> list[str]:
    """Shared tokenizer: lowercase, punctuation as separate tokens."""
    return _TOKEN_RE.findall(text.lower())


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


class PRF(NamedTuple):
    precision: float
    recall: float
    f1: float


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


def bleu(hypotheses: list[str], references: list[str], max_n: int = 4) -> float:
    """Corpus-level BLEU with add-one smoothing on zero n-gram counts.

    Clipped n-gram precisions up to ``max_n``, geometric mean, brevity
    penalty exp(1 - r/c) when the hypothesis corpus is shorter.
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("bleu needs at least one pair")
    hyp_tokens = [tokenize(h) for h in hypotheses]
    ref_tokens = [tokenize(r) for r in references]
    c = sum(len(t) for t in hyp_tokens)
    r = sum(len(t) for t in ref_tokens)
    if c == 0:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        matches = 0
        total = 0
        for ht, rt in zip(hyp_tokens, ref_tokens):
            h_counts = _ngrams(ht, n)
            r_counts = _ngrams(rt, n)
            total += sum(h_counts.values())
            matches += sum(min(count, r_counts[gram]) for gram, count in h_counts.items())
        if matches == 0:
            matches, total = matches + 1, total + 1
        log_sum += log(matches / total)
    geo_mean = exp(log_sum / max_n)
    brevity = 1.0 if c > r else exp(1.0 - r / c)
    return min(1.0, brevity) * geo_mean


# ---------------------------------------------------------------------------
# ROUGE
# ---------------------------------------------------------------------------


def _prf(overlap: float, hyp_total: float, ref_total: float) -> PRF:
    precision = overlap / hyp_total if hyp_total else 0.0
    recall = overlap / ref_total if ref_total else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return PRF(precision, recall, f1)


def rouge_n(hypothesis: str, reference: str, n: int) -> PRF:
    """N-gram overlap precision/recall/F1."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    h_counts = _ngrams(tokenize(hypothesis), n)
    r_counts = _ngrams(tokenize(reference), n)
    overlap = sum(min(count, r_counts[gram]) for gram, count in h_counts.items())
    return _prf(overlap, sum(h_counts.values()), sum(r_counts.values()))


def _lcs_length(a: list, b: list) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[-1]))
        prev = cur
    return prev[-1]


def rouge_l(hypothesis: str, reference: str) -> PRF:
    """Longest-common-subsequence precision/recall/F1."""
    ht, rt = tokenize(hypothesis), tokenize(reference)
    lcs = _lcs_length(ht, rt)
    return _prf(lcs, len(ht), len(rt))


# ---------------------------------------------------------------------------
# METEOR (exact-match variant)
# ---------------------------------------------------------------------------


def meteor_simple(hypothesis: str, reference: str) -> float:
    """Exact-unigram METEOR: F_mean weighted toward recall, chunk penalty.

    m exact matches give P = m/|h| and R = m/|r|, F_mean = 10PR/(R+9P); the
    fragmentation penalty is 0.5 * (chunks/m)^3 where chunks counts maximal
    runs of contiguous alignments. Score is 0 when nothing matches.
    """
    ht, rt = tokenize(hypothesis), tokenize(reference)
    if not ht or not rt:
        return 0.0
    used = [False] * len(rt)
    pairs: list[tuple[int, int]] = []
    prev_j: int | None = None
    for i, token in enumerate(ht):
        j: int | None = None
        # prefer extending the current contiguous chunk
        if prev_j is not None and prev_j + 1 < len(rt) and not used[prev_j + 1] and rt[prev_j + 1] == token:
            j = prev_j + 1
        else:
            for jj, ref_token in enumerate(rt):
                if not used[jj] and ref_token == token:
                    j = jj
                    break
        if j is None:
            prev_j = None
            continue
        used[j] = True
        pairs.append((i, j))
        prev_j = j
    m = len(pairs)
    if m == 0:
        return 0.0
    precision = m / len(ht)
    recall = m / len(rt)
    f_mean = 10 * precision * recall / (recall + 9 * precision)
    chunks = 1 + sum(
        1 for (i1, j1), (i2, j2) in zip(pairs, pairs[1:]) if not (i2 == i1 + 1 and j2 == j1 + 1)
    )
    penalty = 0.5 * (chunks / m) ** 3
    return f_mean * (1.0 - penalty)


# ---------------------------------------------------------------------------
# CHRF++
# ---------------------------------------------------------------------------


def _char_ngrams(text: str, n: int) -> Counter:
    stripped = "".join(text.lower().split())
    return Counter(stripped[i : i + n] for i in range(len(stripped) - n + 1))


def _fbeta(h_counts: Counter, r_counts: Counter, beta: float) -> float | None:
    """F_beta of one n-gram order; None when the order is empty on both sides."""
    h_total = sum(h_counts.values())
    r_total = sum(r_counts.values())
    if h_total == 0 and r_total == 0:
        return None
    overlap = sum(min(count, r_counts[gram]) for gram, count in h_counts.items())
    precision = overlap / h_total if h_total else 0.0
    recall = overlap / r_total if r_total else 0.0
    denom = beta * beta * precision + recall
    if denom == 0:
        return 0.0
    return (1 + beta * beta) * precision * recall / denom


def chrf_pp(hypothesis: str, reference: str, n_char: int = 6, n_word: int = 2, beta: float = 2.0) -> float:
    """Character (orders 1..n_char) and word (orders 1..n_word) F_beta,
    uniformly averaged over non-empty orders, on a 0-100 scale."""
    scores: list[float] = []
    for n in range(1, n_char + 1):
        f = _fbeta(_char_ngrams(hypothesis, n), _char_ngrams(reference, n), beta)
        if f is not None:
            scores.append(f)
    h_words, r_words = tokenize(hypothesis), tokenize(reference)
    for n in range(1, n_word + 1):
        f = _fbeta(_ngrams(h_words, n), _ngrams(r_words, n), beta)
        if f is not None:
            scores.append(f)
    if not scores:  # both sides empty at every order: identical empties
        return 100.0
    return 100.0 * sum(scores) / len(scores)


# ---------------------------------------------------------------------------
# Seg-IoU
# ---------------------------------------------------------------------------


def seg_iou_by_category(
    preds: list[tuple[str | Path | None, str]],
    refs: list[str | Path],
) -> dict[str, float]:
    """Mean IoU per mask category; a missing prediction scores 0.

    ``preds`` pairs each sample's predicted mask path (or None) with its
    category; ``refs`` is the aligned list of reference mask paths.
    Unreadable references are an error, never silently zero.
    """
    if len(preds) != len(refs):
        raise ValueError(f"{len(preds)} predictions vs {len(refs)} references")
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for (pred_path, category), ref_path in zip(preds, refs):
        if category not in SEG_CATEGORIES:
            raise ValueError(f"unknown mask category {category!r}")
        try:
            ref_mask = load_mask(ref_path)
        except (OSError, ValueError) as exc:
            raise DatasetError(f"unreadable reference mask {ref_path}: {exc}") from exc
        if pred_path is None:
            value = 0.0
        else:
            value = iou(load_mask(pred_path), ref_mask)
        sums[category] = sums.get(category, 0.0) + value
        counts[category] = counts.get(category, 0) + 1
    return {cat: sums[cat] / counts[cat] for cat in sorted(sums)}


# ---------------------------------------------------------------------------
# report assembly
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    bleu: float
    rouge1: float
    rouge2: float
    rougeL: float
    meteor_exact: float
    chrf_pp: float
    seg_iou: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    ingested: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("bleu", "rouge1", "rouge2", "rougeL", "meteor_exact"):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if not 0 <= self.chrf_pp <= 100:
            raise ValueError(f"chrf_pp must be in [0, 100], got {self.chrf_pp}")
        unknown = set(self.seg_iou) - set(SEG_CATEGORIES)
        if unknown:
            raise ValueError(f"unknown seg_iou categories: {sorted(unknown)}")

    def to_dict(self) -> dict:
        return {
            "bleu": self.bleu,
            "rouge1": self.rouge1,
            "rouge2": self.rouge2,
            "rougeL": self.rougeL,
            "meteor_exact": self.meteor_exact,
            "chrf_pp": self.chrf_pp,
            "seg_iou": dict(self.seg_iou),
            "counts": dict(self.counts),
            "config": dict(self.config),
            "ingested": dict(self.ingested),
        }


def _mean(values: list[float]) -> float:
    return sum(values) / len(values) if values else 0.0


def build_report(
    pred_file: str | Path,
    ref_file: str | Path,
    *,
    pred_mask_base: str | Path | None = None,
    ref_mask_base: str | Path | None = None,
    ingested_scores: dict | None = None,
    report_path: str | Path | None = None,
) -> MetricReport:
    """Join predictions with references by sample_id and score everything.

    Text metrics run on answer pairs (BLEU corpus-level, the rest averaged
    per sample); Seg-IoU runs on the subset of references that carry a mask
    path and category. Relative mask paths resolve against each file's own
    directory unless an explicit base is given. Externally supplied scores
    (e.g. an embedding-based similarity) pass through ``ingested`` verbatim.
    """
    pred_file, ref_file = Path(pred_file), Path(ref_file)
    preds = {rec["sample_id"]: rec for rec in ensure_unique_sample_ids(read_jsonl(pred_file), "predictions")}
    refs = {rec["sample_id"]: rec for rec in ensure_unique_sample_ids(read_jsonl(ref_file), "references")}
    if set(preds) != set(refs):
        only_pred = sorted(set(preds) - set(refs))
        only_ref = sorted(set(refs) - set(preds))
        raise DatasetError(
            f"sample-id mismatch: only in predictions {only_pred}, only in references {only_ref}"
        )
    sample_ids = sorted(preds)
    if not sample_ids:
        raise DatasetError("no samples to evaluate")

    pred_base = Path(pred_mask_base) if pred_mask_base else pred_file.parent
    ref_base = Path(ref_mask_base) if ref_mask_base else ref_file.parent

    hyp = [preds[sid].get("answer", "") for sid in sample_ids]
    ref = [refs[sid]["answer"] for sid in sample_ids]

    mask_preds: list[tuple[Path | None, str]] = []
    mask_refs: list[Path] = []
    for sid in sample_ids:
        ref_rec = refs[sid]
        if "mask_path" not in ref_rec:
            continue
        category = ref_rec.get("category", "pseudo")
        pred_path = preds[sid].get("mask_path")
        mask_preds.append((pred_base / pred_path if pred_path else None, category))
        mask_refs.append(ref_base / ref_rec["mask_path"])

    report = MetricReport(
        bleu=bleu(hyp, ref),
        rouge1=_mean([rouge_n(h, r, 1).f1 for h, r in zip(hyp, ref)]),
        rouge2=_mean([rouge_n(h, r, 2).f1 for h, r in zip(hyp, ref)]),
        rougeL=_mean([rouge_l(h, r).f1 for h, r in zip(hyp, ref)]),
        meteor_exact=_mean([meteor_simple(h, r) for h, r in zip(hyp, ref)]),
        chrf_pp=_mean([chrf_pp(h, r) for h, r in zip(hyp, ref)]),
        seg_iou=seg_iou_by_category(mask_preds, mask_refs) if mask_refs else {},
        counts={"samples": len(sample_ids), "with_reference_masks": len(mask_refs)},
        config={
            "bleu_max_n": 4,
            "chrf_char_n": 6,
            "chrf_word_n": 2,
            "chrf_beta": 2,
            "meteor": "exact",
            "tokenizer": "lowercase, punctuation split",
        },
        ingested=dict(ingested_scores or {}),
    )
    if report_path is not None:
        Path(report_path).parent.mkdir(parents=True, exist_ok=True)
        Path(report_path).write_text(
            json.dumps(report.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n",
            encoding="utf-8",
        )
    return report


# ---------------------------------------------------------------------------
# radar-chart export (ingested judge scores)
# ---------------------------------------------------------------------------


def validate_judge_scores(judge: dict) -> dict:
    """Judge scores: question type -> metric name -> value in [0, 1]."""
    for qtype, metrics in judge.items():
        for metric, value in metrics.items():
            if not 0 <= float(value) <= 1:
                raise ValueError(f"judge score {qtype}/{metric} = {value} outside [0, 1]")
    return judge


def radar_rows(judge: dict) -> list[tuple[str, str, float]]:
    """One (question_type, metric, value) row per judged score, sorted."""
    validate_judge_scores(judge)
    return [
        (qtype, metric, float(judge[qtype][metric]))
        for qtype in sorted(judge)
        for metric in sorted(judge[qtype])
    ]


def write_radar_csv(path: str | Path, judge: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["question_type", "metric", "value"])
        for qtype, metric, value in radar_rows(judge):
            writer.writerow([qtype, metric, repr(value)])
    return path


def parse_radar_csv(path: str | Path) -> dict:
    """Inverse of :func:`write_radar_csv`."""
    judge: dict = {}
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["question_type", "metric", "value"]:
            raise DatasetError(f"unexpected radar CSV header: {header}")
        for qtype, metric, value in reader:
            judge.setdefault(qtype, {})[metric] = float(value)
    return judge
