"""Training configuration, dataset digests, and run manifests.

The config defaults are the reference recipe: LoRA rank 128 / alpha 256 on
all attention modules, learning rate 5e-5, warmup ratio 0.1, FP16, one
epoch, and an effective batch of 12 from 2 per device x 3 accumulation
steps x 2 devices. Optimizer choice and scheduler shape past warmup are
backend concerns and travel opaquely in ``backend_extras``.
"""

from __future__ import annotations

import hashlib
import json
import os
import uuid
from dataclasses import dataclass, field, asdict
from datetime import datetime, timezone
from pathlib import Path

from .errors import DatasetError

RUN_MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class TrainConfig:
    lora_rank: int = 128
    lora_alpha: int = 256
    target_modules: str = "all attention modules"
    learning_rate: float = 5e-5
    warmup_ratio: float = 0.1
    precision: str = "fp16"
    per_device_batch: int = 2
    grad_accum_steps: int = 3
    num_devices: int = 2
    epochs: int = 1
    seed: int = 0
    backend_extras: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("lora_rank", "lora_alpha", "per_device_batch", "grad_accum_steps",
                     "num_devices", "epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0 <= self.warmup_ratio <= 1:
            raise ValueError(f"warmup_ratio must be in [0, 1], got {self.warmup_ratio}")
        if self.precision not in ("fp16", "fp32"):
            raise ValueError(f"precision must be fp16 or fp32, got {self.precision!r}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")

    @property
    def effective_batch(self) -> int:
        """per-device batch x accumulation steps x devices; computed, never stored."""
        return self.per_device_batch * self.grad_accum_steps * self.num_devices

    def to_dict(self) -> dict:
        return asdict(self)

    def payload(self) -> dict:
        """Wire form for backends: stored fields plus the derived batch size."""
        out = self.to_dict()
        out["effective_batch"] = self.effective_batch
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**data)


def reference_train_config(seed: int = 0) -> TrainConfig:
    """The reference training recipe as a ready-to-use config."""
    return TrainConfig(
        lora_rank=128,
        lora_alpha=256,
        target_modules="all attention modules",
        learning_rate=5e-5,
        warmup_ratio=0.1,
        precision="fp16",
        per_device_batch=2,
        grad_accum_steps=3,
        num_devices=2,
        epochs=1,
        seed=seed,
    )


def warmup_steps(config: TrainConfig, total_steps: int) -> int:
    """round(warmup_ratio * total_steps)."""
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    return int(round(config.warmup_ratio * total_steps))


def config_hash(config: TrainConfig) -> str:
    """Digest of the stored config fields (canonical JSON, sorted keys)."""
    canonical = json.dumps(config.to_dict(), sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = (1 << 64) - 1


def dataset_digest(path) -> str:
    """64-bit FNV-1a rolling digest over the file's lines; cheap tamper check."""
    h = _FNV_OFFSET
    with Path(path).open("rb") as fh:
        for line in fh:
            for byte in line:
                h = ((h ^ byte) * _FNV_PRIME) & _U64
    return f"{h:016x}"


@dataclass
class RunManifest:
    run_id: str
    config: dict
    config_hash: str
    dataset_hashes: dict
    adapter_backend: str
    started: str
    finished: str | None = None
    status: str = "running"
    error: str | None = None
    backend_run_handle: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _write_atomic(path: Path, payload: dict):
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False), encoding="utf-8")
    os.replace(tmp, path)


def new_run_id(now: datetime | None = None) -> str:
    now = now or datetime.now(timezone.utc)
    return f"{now:%Y%m%dT%H%M%S}-{uuid.uuid4().hex[:8]}"


def run_training(
    adapter,
    train_file,
    val_file,
    config: TrainConfig,
    runs_dir,
    *,
    adapter_backend: str = "toy",
    expected_dataset_hashes: dict | None = None,
) -> RunManifest:
    """Drive one fine-tune run and record it under runs/<run_id>/manifest.json.

    The manifest is written before the adapter is invoked and updated after;
    manifests are append-only (a fresh run_id per run, never overwriting a
    prior run's directory). When ``expected_dataset_hashes`` is supplied the
    dataset files are re-digested and any mismatch aborts the run.
    """
    train_file, val_file = Path(train_file), Path(val_file)
    for path in (train_file, val_file):
        if not path.is_file():
            raise FileNotFoundError(f"dataset file not found: {path}")
    hashes = {"train": dataset_digest(train_file), "val": dataset_digest(val_file)}
    if expected_dataset_hashes is not None:
        for name, expected in expected_dataset_hashes.items():
            if hashes.get(name) != expected:
                raise DatasetError(
                    f"dataset hash mismatch for {name}: expected {expected}, got {hashes.get(name)}"
                )

    run_id = new_run_id()
    run_dir = Path(runs_dir) / run_id
    if run_dir.exists():
        raise FileExistsError(f"run directory already exists: {run_dir}")
    run_dir.mkdir(parents=True)
    manifest = RunManifest(
        run_id=run_id,
        config=config.to_dict(),
        config_hash=config_hash(config),
        dataset_hashes=hashes,
        adapter_backend=adapter_backend,
        started=datetime.now(timezone.utc).isoformat(),
    )
    manifest_path = run_dir / RUN_MANIFEST_NAME
    _write_atomic(manifest_path, manifest.to_dict())

    try:
        handle = adapter.fine_tune(str(train_file), str(val_file), config)
    except Exception as exc:
        manifest.status = "failed"
        manifest.error = f"{type(exc).__name__}: {exc}"
        manifest.finished = datetime.now(timezone.utc).isoformat()
        _write_atomic(manifest_path, manifest.to_dict())
        raise
    manifest.status = "completed"
    manifest.backend_run_handle = str(handle)
    manifest.finished = datetime.now(timezone.utc).isoformat()
    _write_atomic(manifest_path, manifest.to_dict())
    return manifest
