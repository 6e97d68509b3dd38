"""Deterministic desk-scale corpus and mock backends.

Everything the pipeline needs to run end-to-end without a network or GPU:
synthetic endoscopy-style frames (dark field, bright lesion blob, black
corner borders), QA records including the size-question fixture, a region
worklist, external masks, and deterministic mock clients whose outputs are
pure functions of their inputs. The same builders back the test suite and
the demo script.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset_forge import QASample, read_jsonl, write_jsonl
from .gen_clients import MockSegClient, MockTextGenClient, TextGenRequest
from .imaging import BinaryMask, save_mask

SHOWCASE_IMAGE_ID = "img_showcase"
SHOWCASE_QUESTION = "What is the size of the polyp?"
SHOWCASE_ANSWER = "polyp measuring greater than 20 millimeters"

IMAGE_SIZE = 96


# ---------------------------------------------------------------------------
# deterministic mock backends
# ---------------------------------------------------------------------------


def gaussian_bump(width: int, height: int, cx: float, cy: float, sigma: float) -> np.ndarray:
    """A [0, 1] heatmap peaking at (cx, cy)."""
    ys, xs = np.mgrid[0:height, 0:width]
    return np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma * sigma))


def ellipse_mask(width: int, height: int, cx: float, cy: float, rx: float, ry: float) -> BinaryMask:
    ys, xs = np.mgrid[0:height, 0:width]
    return BinaryMask(((xs + 0.5 - cx) / rx) ** 2 + ((ys + 0.5 - cy) / ry) ** 2 <= 1.0)


def deterministic_heatmap(image_key: str, prompt: str, width: int, height: int) -> np.ndarray:
    """Mock segmentation: a centered-ish bump whose position hashes from the inputs."""
    digest = hashlib.sha256(f"{image_key}|{prompt}".encode("utf-8")).digest()
    cx = width / 2 + (digest[0] / 255 - 0.5) * width / 4
    cy = height / 2 + (digest[1] / 255 - 0.5) * height / 4
    sigma = width / 8 + (digest[2] / 255) * width / 16
    return gaussian_bump(width, height, cx, cy, sigma)


def _answer_from_prompt(prompt: str) -> str:
    for line in prompt.splitlines():
        if line.startswith("Answer:"):
            return line.split(":", 1)[1].strip()
    return "the highlighted area"


def deterministic_reply(req: TextGenRequest) -> str:
    """Mock text generation: rule-based cue or explanation from the prompt."""
    answer = _answer_from_prompt(req.user_prompt)
    if "Write the explanation." in req.user_prompt:
        return (
            f"The answer is {answer}. The area appears as a rounded, reddish region "
            f"with a smooth surface that stands out clearly from the surrounding tissue."
        )
    return (
        f"A {answer} shows up as a raised, rounded area with a smooth texture "
        f"and a reddish color near the center of the frame."
    )


def mock_textgen(replies: dict[str, str] | None = None) -> MockTextGenClient:
    return MockTextGenClient(replies=replies, fallback=deterministic_reply)


def mock_seg() -> MockSegClient:
    return MockSegClient(synth=deterministic_heatmap)


# ---------------------------------------------------------------------------
# synthetic frames
# ---------------------------------------------------------------------------


def synth_frame(
    path: Path,
    *,
    blob_center: tuple[float, float],
    blob_radii: tuple[float, float],
    rng: np.random.RandomState,
    size: int = IMAGE_SIZE,
) -> Path:
    """Write an endoscopy-style RGB frame: dark pink field, bright lesion,
    black corner triangles like a scope vignette."""
    ys, xs = np.mgrid[0:size, 0:size]
    base = np.zeros((size, size, 3), dtype=float)
    base[..., 0] = 120 + rng.uniform(-8, 8, (size, size))
    base[..., 1] = 60 + rng.uniform(-6, 6, (size, size))
    base[..., 2] = 60 + rng.uniform(-6, 6, (size, size))
    cx, cy = blob_center
    rx, ry = blob_radii
    inside = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
    base[inside] = [205, 120, 110]
    corner = size // 4
    corners = (
        (xs + ys < corner)
        | ((size - 1 - xs) + ys < corner)
        | (xs + (size - 1 - ys) < corner)
        | ((size - 1 - xs) + (size - 1 - ys) < corner)
    )
    base[corners] = 0
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.clip(base, 0, 255).astype(np.uint8), mode="RGB").save(path, format="PNG")
    return path


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DeskCorpus:
    root: Path
    images_dir: Path
    qa_file: Path
    worklist_file: Path
    eval_file: Path
    judge_file: Path
    config_file: Path
    image_ids: tuple[str, ...]


_SIZES = [
    "polyp measuring less than 5 millimeters",
    "polyp measuring 5 to 10 millimeters",
    "polyp measuring 11 to 20 millimeters",
]


def build_desk_corpus(root: str | Path, *, n_images: int = 8, seed: int = 7) -> DeskCorpus:
    """Materialize the full desk corpus under ``root``; fully deterministic."""
    root = Path(root)
    rng = np.random.RandomState(seed)
    images_dir = root / "images"
    image_ids = [f"img{i:03d}" for i in range(n_images)] + [SHOWCASE_IMAGE_ID]

    qa_records: list[dict] = []
    worklist: list[dict] = []
    eval_items: list[dict] = []

    for idx, image_id in enumerate(image_ids):
        center = (
            IMAGE_SIZE / 2 + rng.uniform(-10, 10),
            IMAGE_SIZE / 2 + rng.uniform(-10, 10),
        )
        radii = (rng.uniform(12, 18), rng.uniform(9, 14))
        synth_frame(images_dir / f"{image_id}.png", blob_center=center, blob_radii=radii, rng=rng)

        if image_id == SHOWCASE_IMAGE_ID:
            question, answer = SHOWCASE_QUESTION, SHOWCASE_ANSWER
        else:
            question, answer = "What is the size of the polyp?", _SIZES[idx % len(_SIZES)]
        qa_records.append(
            QASample(
                sample_id=f"qa-{image_id}-size",
                image_id=image_id,
                question=question,
                answer=answer,
                complexity=1,
                metadata={"abnormality": "polyp", "location": "colon", "question_type": "size"},
            ).to_record()
        )
        # a complexity-2 question per third image exercises the skip path
        if idx % 3 == 1:
            qa_records.append(
                QASample(
                    sample_id=f"qa-{image_id}-count",
                    image_id=image_id,
                    question="How many abnormalities are visible and how are they related?",
                    answer="two related lesions",
                    complexity=2,
                    metadata={"abnormality": "polyp", "question_type": "count"},
                ).to_record()
            )
        worklist.append(
            {
                "kind": "pseudo",
                "sample_id": f"region-pseudo-{image_id}",
                "image_id": image_id,
                "answer_category": "polyp",
                "question_type": "size",
            }
        )
        eval_items.append({"sample_id": f"eval-{image_id}", "image_id": image_id, "question": question})

    # two externally annotated masks (expert polyp/instrument annotations)
    external_dir = root / "external_masks"
    for ext_idx, (image_id, category) in enumerate(
        [(image_ids[0], "polyp"), (image_ids[1], "instrument")]
    ):
        mask = ellipse_mask(
            IMAGE_SIZE, IMAGE_SIZE, 48 + 6 * ext_idx, 44, 16 + 2 * ext_idx, 12
        )
        mask_path = external_dir / f"ext-{image_id}-{category}.png"
        save_mask(mask, mask_path)
        worklist.append(
            {
                "kind": "external",
                "sample_id": f"region-ext-{image_id}-{category}",
                "image_id": image_id,
                "mask_path": str(mask_path),
                "category": category,
                "question_type": "size",
            }
        )

    qa_file = write_jsonl(root / "qa.jsonl", sorted(qa_records, key=lambda r: r["sample_id"]))
    worklist_file = write_jsonl(root / "worklist.jsonl", worklist)
    eval_file = write_jsonl(root / "eval.jsonl", eval_items)

    judge_file = root / "judge_scores.json"
    judge_file.write_text(
        json.dumps(
            {
                "presence": {"answer_correctness": 0.9, "clarity": 0.85, "completeness": 0.6, "faithfulness": 0.55},
                "count": {"answer_correctness": 0.8, "clarity": 0.8, "completeness": 0.45, "faithfulness": 0.5},
                "color": {"answer_correctness": 0.55, "clarity": 0.5, "completeness": 0.35, "faithfulness": 0.4},
                "size": {"answer_correctness": 0.75, "clarity": 0.8, "completeness": 0.5, "faithfulness": 0.45},
            },
            indent=2,
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )

    config_file = root / "config.toml"
    config_file.write_text(
        "\n".join(
            [
                "seed = 1234",
                "",
                "[paths]",
                'images = "images"',
                'out = "out"',
                'runs = "runs"',
                "",
                "[forge]",
                'textgen_client = "mock"',
                'seg_client = "mock"',
                "heatmap_thresh = 0.35",
                "min_area_frac = 0.01",
                "connectivity = 8",
                "black_border_max_intensity = 10.0",
                "",
                "[forge.category_question_types]",
                'polyp = "size"',
                'instrument = "size"',
                "",
                "[codec]",
                "num_bins = 1000",
                "simplify_eps = 0.0",
                "",
                "[train]",
                "lora_rank = 128",
                "lora_alpha = 256",
                "learning_rate = 5e-5",
                "warmup_ratio = 0.1",
                'precision = "fp16"',
                "per_device_batch = 2",
                "grad_accum_steps = 3",
                "num_devices = 2",
                "epochs = 1",
                "",
                "[infer]",
                'adapter = "toy"',
                'state = "toy_state.json"',
                'confidence_mode = "topk_mass"',
                "",
                "[eval]",
                "",
            ]
        ),
        encoding="utf-8",
    )

    return DeskCorpus(
        root=root,
        images_dir=images_dir,
        qa_file=qa_file,
        worklist_file=worklist_file,
        eval_file=eval_file,
        judge_file=judge_file,
        config_file=config_file,
        image_ids=tuple(image_ids),
    )


def build_eval_refs(
    eval_file: str | Path,
    qa_file: str | Path,
    regions_file: str | Path,
    out_path: str | Path,
) -> Path:
    """References for evaluating predictions on the desk corpus.

    Answers come from the QA records, masks from the forged region samples
    of the same image; the refs file lands next to the regions file so the
    relative mask paths stay valid.
    """
    qa_by_image = {}
    for rec in read_jsonl(qa_file):
        qa_by_image.setdefault(rec["image_id"], rec)
    region_by_image = {}
    for rec in read_jsonl(regions_file):
        if not rec["degenerate"] and rec["category"] == "pseudo":
            region_by_image.setdefault(rec["image_id"], rec)

    refs = []
    for item in read_jsonl(eval_file):
        qa = qa_by_image[item["image_id"]]
        ref = {"sample_id": item["sample_id"], "answer": qa["answer"]}
        region = region_by_image.get(item["image_id"])
        if region:
            ref["mask_path"] = region["mask_path"]
            ref["category"] = region["category"]
        refs.append(ref)
    return write_jsonl(out_path, sorted(refs, key=lambda r: r["sample_id"]))
