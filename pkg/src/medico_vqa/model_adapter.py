"""Abstraction boundary to any vision-language model backend.

Backends expose exactly two operations: prompted generation (greedy, with
the per-step top-k probabilities recorded) and a fine-tune entry point.
``ToyAdapter`` is a bit-deterministic in-process backend that memorizes its
training targets, so every pipeline path runs without GPUs or a network;
``HttpAdapter`` attaches a real backend over HTTP+JSON.
"""

from __future__ import annotations

import base64
import hashlib
import json
import threading
from dataclasses import dataclass
from pathlib import Path

from .errors import ContractError, DatasetError, GenerationError, ProtocolError
from .gen_clients import RetryPolicy, ServiceCore, http_sender

TASK_VQA = "<MedVQA>"
TASK_EXPLAIN = "<MedVQA_EXPLAIN>"
TASK_SEGMENT = "<REFERRING_EXPRESSION_SEGMENTATION>"
TASK_TOKENS = frozenset({TASK_VQA, TASK_EXPLAIN, TASK_SEGMENT})

# prompt suffix appended to questions for the explanation task
EXPLAIN_PROMPT = "Explain in detail"

_MASS_TOLERANCE = 1e-6


@dataclass(frozen=True)
class DecodingTrace:
    """Per-step top-k (token, probability) records from greedy decoding.

    Every step holds exactly ``k`` pairs sorted by descending probability,
    and the recorded mass of a step never exceeds 1 (plus float slack).
    """

    steps: tuple[tuple[tuple[str, float], ...], ...]
    k: int

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        steps = tuple(tuple((str(t), float(p)) for t, p in step) for step in self.steps)
        object.__setattr__(self, "steps", steps)
        for i, step in enumerate(steps):
            if len(step) != self.k:
                raise ValueError(f"step {i} records {len(step)} entries, expected k={self.k}")
            probs = [p for _, p in step]
            if any(p < 0 or p > 1 for p in probs):
                raise ValueError(f"step {i} has probabilities outside [0, 1]")
            if any(p1 < p2 for p1, p2 in zip(probs, probs[1:])):
                raise ValueError(f"step {i} probabilities are not non-increasing")
            if sum(probs) > 1.0 + _MASS_TOLERANCE:
                raise ValueError(f"step {i} top-{self.k} mass {sum(probs)} exceeds 1")

    def __len__(self) -> int:
        return len(self.steps)

    def step_masses(self) -> list[float]:
        """Summed recorded probability per step."""
        return [sum(p for _, p in step) for step in self.steps]


@dataclass(frozen=True)
class GenerationResult:
    """Generated text plus its decoding trace (one step per emitted token)."""

    text: str
    trace: DecodingTrace


class ModelAdapter:
    """Duck-typed backend interface; see ToyAdapter for the contract."""

    def generate(self, image_ref, task_token: str, input_text: str,
                 max_tokens: int = 64, top_k_record: int = 5) -> GenerationResult:
        raise NotImplementedError

    def fine_tune(self, train_file, val_file, config) -> str:
        raise NotImplementedError


def generate(adapter, image_ref, task_token: str, input_text: str,
             max_tokens: int = 64, top_k_record: int = 5) -> GenerationResult:
    """Prompted generation through any adapter, with contract checks.

    The task token must be one of the three reserved tokens; trace
    invariants are enforced when the result is constructed, so a violating
    backend is rejected rather than silently accepted.
    """
    if task_token not in TASK_TOKENS:
        raise ContractError(f"unknown task token {task_token!r}; expected one of {sorted(TASK_TOKENS)}")
    try:
        result = adapter.generate(image_ref, task_token, input_text,
                                  max_tokens=max_tokens, top_k_record=top_k_record)
    except (ContractError, ProtocolError):
        raise
    except Exception as exc:
        raise GenerationError(f"backend failed for {task_token}: {exc}") from exc
    if not isinstance(result, GenerationResult):
        raise ProtocolError(f"adapter returned {type(result).__name__}, expected GenerationResult")
    return result


def fine_tune(adapter, train_file, val_file, config) -> str:
    """Fine-tune through any adapter; dataset files must exist and parse."""
    for path in (train_file, val_file):
        if not Path(path).is_file():
            raise FileNotFoundError(f"dataset file not found: {path}")
    return adapter.fine_tune(train_file, val_file, config)


def image_key(image_ref) -> str:
    """Normalize an image reference (path or bare id) to a lookup key."""
    return Path(str(image_ref)).stem


def read_multitask_file(path) -> list[dict]:
    """Parse a multitask JSONL file, reporting the line of any defect."""
    records = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
            missing = {"task_token", "image_id", "input_text", "target_text"} - rec.keys()
            if missing:
                raise DatasetError(f"{path}: line {lineno}: missing fields {sorted(missing)}")
            if rec["task_token"] not in TASK_TOKENS:
                raise DatasetError(f"{path}: line {lineno}: unknown task token {rec['task_token']!r}")
            records.append(rec)
    return records


def _config_payload(config) -> dict:
    if hasattr(config, "payload"):
        return config.payload()
    return dict(config)


class ToyAdapter(ModelAdapter):
    """Deterministic lookup-table backend.

    ``fine_tune`` memorizes (image, task, input) -> target from the training
    file; ``generate`` replays targets exactly, or ``fallback_text`` for
    unseen inputs. Traces are synthesized deterministically: memorized
    answers get a peaked per-step distribution, fallbacks a flat one, and
    ``uniform_vocab=V`` forces exact 1/V probabilities everywhere (handy for
    confidence-formula tests). State round-trips through ``state_path`` so
    separate train/infer processes see the same table.
    """

    PEAK_TOP = 0.9
    PEAK_REST = 0.05  # spread evenly below the top token
    FLAT_PROB = 0.1

    def __init__(self, state_path=None, fallback_text: str = "unknown",
                 uniform_vocab: int | None = None):
        self.table: dict[tuple[str, str, str], str] = {}
        self.fallback_text = fallback_text
        self.uniform_vocab = uniform_vocab
        self.state_path = Path(state_path) if state_path else None
        self.last_config_payload: dict | None = None
        self._tune_lock = threading.Lock()
        if self.state_path and self.state_path.exists():
            self._load_state()

    # -- generation --------------------------------------------------------

    def generate(self, image_ref, task_token: str, input_text: str,
                 max_tokens: int = 64, top_k_record: int = 5) -> GenerationResult:
        if task_token not in TASK_TOKENS:
            raise ContractError(f"unknown task token {task_token!r}")
        key = (image_key(image_ref), task_token, input_text)
        known = key in self.table
        text = self.table[key] if known else self.fallback_text
        tokens = text.split()[:max_tokens]
        steps = tuple(self._step(tok, known, top_k_record) for tok in tokens)
        return GenerationResult(text=" ".join(tokens), trace=DecodingTrace(steps=steps, k=top_k_record))

    def _step(self, token: str, known: bool, k: int) -> tuple[tuple[str, float], ...]:
        alts = tuple(f"<alt{i}>" for i in range(1, k))
        if self.uniform_vocab is not None:
            p = 1.0 / self.uniform_vocab
            return ((token, p),) + tuple((a, p) for a in alts)
        if known:
            rest = self.PEAK_REST / (k - 1) if k > 1 else 0.0
            return ((token, self.PEAK_TOP),) + tuple((a, rest) for a in alts)
        return ((token, self.FLAT_PROB),) + tuple((a, self.FLAT_PROB) for a in alts)

    # -- fine-tuning -------------------------------------------------------

    def fine_tune(self, train_file, val_file, config) -> str:
        if not self._tune_lock.acquire(blocking=False):
            raise ContractError("fine_tune is exclusive: another run is active on this adapter")
        try:
            read_multitask_file(val_file)  # validated, not memorized
            for rec in read_multitask_file(train_file):
                key = (image_key(rec["image_id"]), rec["task_token"], rec["input_text"])
                self.table[key] = rec["target_text"]
            self.last_config_payload = _config_payload(config)
            if self.state_path:
                self._save_state()
            digest = hashlib.sha256(
                json.dumps(sorted(self.table.items()), ensure_ascii=False).encode("utf-8")
            ).hexdigest()[:12]
            return f"toy-{len(self.table)}-{digest}"
        finally:
            self._tune_lock.release()

    # -- persistence -------------------------------------------------------

    def _save_state(self):
        state = {
            "fallback_text": self.fallback_text,
            "entries": sorted([list(k) + [v] for k, v in self.table.items()]),
        }
        self.state_path.parent.mkdir(parents=True, exist_ok=True)
        self.state_path.write_text(json.dumps(state, indent=2, sort_keys=True, ensure_ascii=False), encoding="utf-8")

    def _load_state(self):
        state = json.loads(self.state_path.read_text(encoding="utf-8"))
        self.fallback_text = state.get("fallback_text", self.fallback_text)
        self.table = {(img, task, inp): target for img, task, inp, target in state["entries"]}


class HttpAdapter(ModelAdapter):
    """Backend attached over the wire protocol.

    POST /generate {image_b64, task_token, input_text, max_tokens,
    top_k_record} -> {text, trace}; POST /finetune {train_path, val_path,
    config} -> {run_id}. Shares the transport core (retry, audit, rate
    limiting) with the generation-service clients.
    """

    def __init__(self, base_url: str, *, retry: RetryPolicy | None = None, audit=None,
                 rate_limiter=None, session=None, generate_core: ServiceCore | None = None,
                 finetune_core: ServiceCore | None = None):
        base = base_url.rstrip("/")
        self._generate = generate_core or ServiceCore(
            "adapter.generate", http_sender(f"{base}/generate", session=session),
            retry=retry, audit=audit, rate_limiter=rate_limiter,
        )
        self._finetune = finetune_core or ServiceCore(
            "adapter.finetune", http_sender(f"{base}/finetune", session=session),
            retry=retry, audit=audit, rate_limiter=rate_limiter,
        )
        self._tune_lock = threading.Lock()

    def generate(self, image_ref, task_token: str, input_text: str,
                 max_tokens: int = 64, top_k_record: int = 5) -> GenerationResult:
        if task_token not in TASK_TOKENS:
            raise ContractError(f"unknown task token {task_token!r}")
        ref = Path(str(image_ref))
        image_b64 = base64.b64encode(ref.read_bytes()).decode("ascii") if ref.is_file() else str(image_ref)
        payload = {
            "image_b64": image_b64,
            "task_token": task_token,
            "input_text": input_text,
            "max_tokens": max_tokens,
            "top_k_record": top_k_record,
        }
        response, request_id, _, _ = self._generate.call(payload)
        try:
            trace = DecodingTrace(
                steps=tuple(tuple((t, p) for t, p in step) for step in response["trace"]),
                k=top_k_record,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"backend returned an invalid trace (request {request_id}): {exc}") from exc
        return GenerationResult(text=response.get("text", ""), trace=trace)

    def fine_tune(self, train_file, val_file, config) -> str:
        if not self._tune_lock.acquire(blocking=False):
            raise ContractError("fine_tune is exclusive: another run is active on this adapter")
        try:
            payload = {
                "train_path": str(train_file),
                "val_path": str(val_file),
                "config": _config_payload(config),
            }
            response, request_id, _, _ = self._finetune.call(payload)
            if "run_id" not in response:
                raise ProtocolError(f"finetune reply lacks run_id (request {request_id})")
            return str(response["run_id"])
        finally:
            self._tune_lock.release()
