"""Single entry point for the pipeline stages.

One binary, one shared TOML config with sections {paths, forge, codec,
train, infer, eval}; flags override config values, relative paths resolve
against the config file's directory. Exit codes: 0 success, 1 validation
or usage error, 2 runtime failure. Every command is re-runnable: identical
inputs, seed, and mock/toy backends give byte-identical outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import dataset_forge, eval_metrics, fixtures, inference
from .dataset_forge import (
    ExternalMask,
    ImageRecord,
    MultiTaskExample,
    QASample,
    RegionSample,
    TemplateSet,
    ensure_unique_sample_ids,
    read_jsonl,
    write_jsonl,
)
from .errors import ConfigError, ContractError, DatasetError, PipelineError
from .gen_clients import AuditLog, SegClient, TextGenClient
from .imaging import image_size, load_mask, save_mask
from .loc_codec import mask_to_tokens, parse_token_text, render_token_text, tokens_to_mask
from .model_adapter import HttpAdapter, ToyAdapter
from .train_harness import TrainConfig, run_training

logger = logging.getLogger(__name__)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, never 2
        raise _UsageError(message)


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

_ALLOWED_KEYS = {
    "paths": {"images", "out", "runs"},
    "forge": {
        "textgen_client",
        "seg_client",
        "heatmap_thresh",
        "min_area_frac",
        "connectivity",
        "black_border_max_intensity",
        "templates_dir",
        "category_question_types",
    },
    "codec": {"num_bins", "simplify_eps"},
    "train": set(TrainConfig.__dataclass_fields__),
    "infer": {"adapter", "state", "confidence_mode", "backend_url"},
    "eval": {"ingested"},
}


@dataclass
class PipelineConfig:
    base_dir: Path
    seed: int = 1234
    paths: dict = field(default_factory=dict)
    forge: dict = field(default_factory=dict)
    codec: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    infer: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        try:
            raw = tomllib.loads(path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
        unknown_sections = set(raw) - set(_ALLOWED_KEYS) - {"seed"}
        if unknown_sections:
            raise ConfigError(f"{path}: unknown config sections: {sorted(unknown_sections)}")
        for section, allowed in _ALLOWED_KEYS.items():
            extra = set(raw.get(section, {})) - allowed
            if extra:
                raise ConfigError(f"{path}: unknown keys in [{section}]: {sorted(extra)}")
        return cls(
            base_dir=path.parent.resolve(),
            seed=int(raw.get("seed", 1234)),
            paths=dict(raw.get("paths", {})),
            forge=dict(raw.get("forge", {})),
            codec=dict(raw.get("codec", {})),
            train=dict(raw.get("train", {})),
            infer=dict(raw.get("infer", {})),
            eval=dict(raw.get("eval", {})),
        )

    @classmethod
    def default(cls) -> "PipelineConfig":
        return cls(base_dir=Path.cwd())

    def resolve(self, value: str | Path) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p


def _require(value, flag: str):
    if value is None:
        raise _UsageError(f"missing required option {flag}")
    return value


def _plan(args, lines: list[str]) -> bool:
    """On --dry-run: print the execution plan, signal the caller to stop."""
    if not args.dry_run:
        return False
    print("plan (dry run, nothing written):")
    for line in lines:
        print(f"  - {line}")
    return True


def _stage_config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, ensure_ascii=False, default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def _make_textgen_client(cfg: PipelineConfig, out_dir: Path):
    kind = cfg.forge.get("textgen_client", "mock")
    if kind == "mock":
        return fixtures.mock_textgen()
    if kind == "http":
        return TextGenClient.from_env(audit=AuditLog(out_dir / "audit.jsonl"))
    raise ConfigError(f"forge.textgen_client must be mock or http, got {kind!r}")


def _make_seg_client(cfg: PipelineConfig, out_dir: Path):
    kind = cfg.forge.get("seg_client", "mock")
    if kind == "mock":
        return fixtures.mock_seg()
    if kind == "http":
        return SegClient.from_env(audit=AuditLog(out_dir / "audit.jsonl"))
    raise ConfigError(f"forge.seg_client must be mock or http, got {kind!r}")


def _make_adapter(cfg: PipelineConfig, args):
    kind = getattr(args, "adapter", None) or cfg.infer.get("adapter", "toy")
    if kind == "toy":
        state = getattr(args, "state", None) or cfg.infer.get("state", "toy_state.json")
        return ToyAdapter(state_path=cfg.resolve(state)), "toy"
    if kind == "http":
        url = getattr(args, "backend_url", None) or cfg.infer.get("backend_url")
        if not url:
            raise ConfigError("http adapter needs infer.backend_url or --backend-url")
        return HttpAdapter(url), "http"
    raise ConfigError(f"adapter must be toy or http, got {kind!r}")


def _image_paths(images_dir: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(images_dir.glob("*.png"))}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_forge_explanations(args, cfg: PipelineConfig) -> int:
    qa_path = cfg.resolve(_require(args.qa, "--qa"))
    out_dir = cfg.resolve(args.out or cfg.paths.get("out", "out"))
    qa = [QASample.from_record(r) for r in ensure_unique_sample_ids(read_jsonl(qa_path), "qa")]
    if _plan(args, [f"read {len(qa)} QA samples from {qa_path}",
                    f"forge explanations via {cfg.forge.get('textgen_client', 'mock')} client",
                    f"write {out_dir / 'explanations.jsonl'} and manifest"]):
        return 0
    out_dir.mkdir(parents=True, exist_ok=True)
    client = _make_textgen_client(cfg, out_dir)
    templates_dir = cfg.forge.get("templates_dir")
    templates = TemplateSet.load(cfg.resolve(templates_dir)) if templates_dir else TemplateSet.load()
    samples, skips = dataset_forge.forge_explanations(qa, client, templates, max_workers=args.workers)
    write_jsonl(out_dir / "explanations.jsonl", [s.to_record() for s in samples])
    dataset_forge.update_manifest(
        out_dir / "manifest.json",
        "explanations",
        {
            "counts": {"explanations": len(samples), "skipped": len(skips)},
            "skips": skips,
            "seed": cfg.seed,
            "config_hash": _stage_config_hash(cfg.forge),
        },
    )
    print(f"forged {len(samples)} explanations ({len(skips)} skipped) -> {out_dir / 'explanations.jsonl'}")
    return 0


def cmd_forge_regions(args, cfg: PipelineConfig) -> int:
    worklist_path = cfg.resolve(_require(args.worklist, "--worklist"))
    qa_path = cfg.resolve(_require(args.qa, "--qa"))
    images_dir = cfg.resolve(args.images or cfg.paths.get("images", "images"))
    out_dir = cfg.resolve(args.out or cfg.paths.get("out", "out"))

    worklist = ensure_unique_sample_ids(read_jsonl(worklist_path), "worklist")
    for entry in worklist:
        missing = {"kind", "sample_id", "image_id"} - entry.keys()
        if missing:
            raise DatasetError(f"worklist entry missing fields {sorted(missing)}: {entry}")
    qa = [QASample.from_record(r) for r in ensure_unique_sample_ids(read_jsonl(qa_path), "qa")]
    if _plan(args, [f"read {len(worklist)} worklist entries from {worklist_path}",
                    f"segment via {cfg.forge.get('seg_client', 'mock')} client, "
                    f"thresh={cfg.forge.get('heatmap_thresh', 0.35)}, "
                    f"min_area_frac={cfg.forge.get('min_area_frac', 0.01)}",
                    f"write {out_dir / 'regions.jsonl'}, masks under {out_dir / 'masks'}, manifest"]):
        return 0
    out_dir.mkdir(parents=True, exist_ok=True)
    seg_client = _make_seg_client(cfg, out_dir)
    templates_dir = cfg.forge.get("templates_dir")
    templates = TemplateSet.load(cfg.resolve(templates_dir)) if templates_dir else TemplateSet.load()

    category_qtypes = cfg.forge.get("category_question_types", {})
    images: list[ImageRecord] = []
    external: list[ExternalMask] = []
    unresolved: list[dict] = []
    for entry in worklist:
        answer = entry.get("answer_text")
        if not answer:
            category = entry.get("answer_category") or entry.get("category", "")
            qtype = entry.get("question_type") or category_qtypes.get(category, "")
            answer, reason = dataset_forge.lookup_answer_text(qa, entry["image_id"], qtype)
            if answer is None:
                unresolved.append({"sample_id": entry["sample_id"], "reason": reason})
                logger.warning("skipping %s: %s", entry["sample_id"], reason)
                continue
        if entry["kind"] == "pseudo":
            image_path = entry.get("image_path") or str(images_dir / f"{entry['image_id']}.png")
            images.append(
                ImageRecord(
                    sample_id=entry["sample_id"],
                    image_id=entry["image_id"],
                    image_path=str(cfg.resolve(image_path)),
                    answer_text=answer,
                    answer_category=entry["answer_category"],
                )
            )
        elif entry["kind"] == "external":
            external.append(
                ExternalMask(
                    sample_id=entry["sample_id"],
                    image_id=entry["image_id"],
                    mask_path=str(cfg.resolve(entry["mask_path"])),
                    category=entry["category"],
                    answer_text=answer,
                )
            )
        else:
            raise DatasetError(f"worklist entry {entry['sample_id']}: unknown kind {entry['kind']!r}")

    samples, skips = dataset_forge.build_region_samples(
        images,
        templates.region_prompts,
        seg_client,
        external,
        out_dir,
        heatmap_thresh=float(cfg.forge.get("heatmap_thresh", 0.35)),
        min_area_frac=float(cfg.forge.get("min_area_frac", 0.01)),
        connectivity=int(cfg.forge.get("connectivity", 8)),
        black_border_max_intensity=float(cfg.forge.get("black_border_max_intensity", 10.0)),
        max_workers=args.workers,
    )
    write_jsonl(out_dir / "regions.jsonl", [s.to_record() for s in samples])
    counts = dataset_forge.region_counts(samples)
    dataset_forge.update_manifest(
        out_dir / "manifest.json",
        "regions",
        {
            "counts": counts,
            "skips": skips + unresolved,
            "seed": cfg.seed,
            "config_hash": _stage_config_hash(cfg.forge),
        },
    )
    print(
        f"forged {counts['region_total']} region samples "
        f"({counts['pseudo_count']} pseudo + {counts['external_count']} external, "
        f"{counts['degenerate_count']} degenerate) -> {out_dir / 'regions.jsonl'}"
    )
    return 0


def cmd_assemble(args, cfg: PipelineConfig) -> int:
    qa_path = cfg.resolve(_require(args.qa, "--qa"))
    expl_path = cfg.resolve(_require(args.explanations, "--explanations"))
    regions_path = cfg.resolve(_require(args.regions, "--regions"))
    images_dir = cfg.resolve(args.images or cfg.paths.get("images", "images"))
    out_dir = cfg.resolve(args.out or cfg.paths.get("out", "out"))

    qa = [QASample.from_record(r) for r in ensure_unique_sample_ids(read_jsonl(qa_path), "qa")]
    explanations = [
        dataset_forge.ExplanationSample.from_record(r)
        for r in ensure_unique_sample_ids(read_jsonl(expl_path), "explanations")
    ]
    regions = [
        RegionSample.from_record(r)
        for r in ensure_unique_sample_ids(read_jsonl(regions_path), "regions")
    ]
    if _plan(args, [f"assemble {len(qa)} QA + {len(explanations)} explanations + {len(regions)} regions",
                    f"write {out_dir / 'multitask.jsonl'} and manifest"]):
        return 0
    examples, counts = dataset_forge.assemble_multitask(
        qa,
        explanations,
        regions,
        _image_paths(images_dir),
        simplify_eps=float(cfg.codec.get("simplify_eps", 0.0)),
        num_bins=int(cfg.codec.get("num_bins", 1000)),
        mask_base_dir=regions_path.parent,
    )
    write_jsonl(out_dir / "multitask.jsonl", [e.to_record() for e in examples])
    dataset_forge.update_manifest(
        out_dir / "manifest.json",
        "assemble",
        {"counts": counts, "seed": cfg.seed, "config_hash": _stage_config_hash(cfg.codec)},
    )
    print(f"assembled {counts['total']} multi-task examples -> {out_dir / 'multitask.jsonl'}")
    return 0


def cmd_split(args, cfg: PipelineConfig) -> int:
    in_path = cfg.resolve(_require(args.infile, "--in"))
    out_dir = cfg.resolve(args.out or cfg.paths.get("out", "out"))
    seed = args.seed if args.seed is not None else cfg.seed
    examples = [MultiTaskExample.from_record(r) for r in read_jsonl(in_path)]
    if _plan(args, [f"group-split {len(examples)} examples at ratio {args.ratio} with seed {seed}",
                    f"write {out_dir / 'train.jsonl'} and {out_dir / 'val.jsonl'}"]):
        return 0
    train, val = dataset_forge.group_split(examples, ratio=args.ratio, seed=seed)
    write_jsonl(out_dir / "train.jsonl", [e.to_record() for e in train])
    write_jsonl(out_dir / "val.jsonl", [e.to_record() for e in val])
    dataset_forge.update_manifest(
        out_dir / "manifest.json",
        "split",
        {
            "counts": {
                "train_examples": len(train),
                "val_examples": len(val),
                "train_images": len({e.image_id for e in train}),
                "val_images": len({e.image_id for e in val}),
            },
            "ratio": args.ratio,
            "seed": seed,
            "config_hash": _stage_config_hash({"ratio": args.ratio, "seed": seed}),
        },
    )
    print(f"split {len(examples)} examples -> {len(train)} train / {len(val)} val")
    return 0


def cmd_train(args, cfg: PipelineConfig) -> int:
    train_path = cfg.resolve(_require(args.train, "--train"))
    val_path = cfg.resolve(_require(args.val, "--val"))
    runs_dir = cfg.resolve(args.runs or cfg.paths.get("runs", "runs"))
    train_cfg_dict = dict(cfg.train)
    train_cfg_dict.setdefault("seed", cfg.seed)
    config = TrainConfig.from_dict(train_cfg_dict)
    if _plan(args, [f"fine-tune on {train_path} / validate on {val_path}",
                    f"LoRA rank={config.lora_rank} alpha={config.lora_alpha}, "
                    f"lr={config.learning_rate}, effective batch={config.effective_batch}",
                    f"write run manifest under {runs_dir}"]):
        return 0
    adapter, backend = _make_adapter(cfg, args)
    manifest = run_training(
        adapter, train_path, val_path, config, runs_dir, adapter_backend=backend
    )
    print(f"run {manifest.run_id} {manifest.status} (config {manifest.config_hash[:12]})")
    return 0


def cmd_infer(args, cfg: PipelineConfig) -> int:
    in_path = cfg.resolve(_require(args.infile, "--in"))
    images_dir = cfg.resolve(args.images or cfg.paths.get("images", "images"))
    out_dir = cfg.resolve(args.out or cfg.paths.get("out", "out"))
    items = ensure_unique_sample_ids(read_jsonl(in_path), "inference inputs")
    for item in items:
        missing = {"sample_id", "image_id", "question"} - item.keys()
        if missing:
            raise DatasetError(f"inference input missing fields {sorted(missing)}: {item}")
    if _plan(args, [f"run subtask {args.subtask} on {len(items)} inputs from {in_path}",
                    f"write {out_dir / 'predictions.jsonl'}"
                    + (f" and masks under {out_dir / 'pred_masks'}" if args.subtask == 2 else "")]):
        return 0
    out_dir.mkdir(parents=True, exist_ok=True)
    adapter, _ = _make_adapter(cfg, args)
    confidence_mode = cfg.infer.get("confidence_mode", "topk_mass")

    records = []
    for item in sorted(items, key=lambda r: r["sample_id"]):
        image_path = images_dir / f"{item['image_id']}.png"
        if not image_path.is_file():
            raise DatasetError(f"missing image for {item['sample_id']}: {image_path}")
        if args.subtask == 1:
            answer, _trace = inference.answer_question(adapter, image_path, item["question"])
            records.append({"sample_id": item["sample_id"], "question": item["question"], "answer": answer})
            continue
        dims = image_size(image_path)
        result = inference.run_subtask2(
            adapter, image_path, item["question"], dims, confidence_mode=confidence_mode
        )
        mask_rel = None
        if result.mask is not None:
            mask_rel = f"pred_masks/{item['sample_id']}.png"
            save_mask(result.mask, out_dir / mask_rel)
        records.append(inference.prediction_record(item["sample_id"], result, mask_path=mask_rel))
    write_jsonl(out_dir / "predictions.jsonl", records)
    print(f"wrote {len(records)} predictions -> {out_dir / 'predictions.jsonl'}")
    return 0


def cmd_evaluate(args, cfg: PipelineConfig) -> int:
    pred_path = cfg.resolve(_require(args.pred, "--pred"))
    ref_path = cfg.resolve(_require(args.ref, "--ref"))
    out_path = cfg.resolve(args.out or (cfg.paths.get("out", "out") + "/report.json"))
    ingested = None
    ingested_src = args.ingested or cfg.eval.get("ingested")
    if ingested_src:
        ingested = json.loads(cfg.resolve(ingested_src).read_text(encoding="utf-8"))
    if _plan(args, [f"score {pred_path} against {ref_path}", f"write {out_path}"]):
        return 0
    report = eval_metrics.build_report(
        pred_path, ref_path, ingested_scores=ingested, report_path=out_path
    )
    seg = ", ".join(f"{k}={v:.4f}" for k, v in report.seg_iou.items()) or "n/a"
    print(
        f"bleu={report.bleu:.4f} rouge1={report.rouge1:.4f} rouge2={report.rouge2:.4f} "
        f"rougeL={report.rougeL:.4f} meteor_exact={report.meteor_exact:.4f} "
        f"chrf_pp={report.chrf_pp:.2f} seg_iou: {seg}"
    )
    print(f"report -> {out_path}")
    return 0


def cmd_radar(args, cfg: PipelineConfig) -> int:
    judge_path = cfg.resolve(_require(args.judge, "--judge"))
    out_path = cfg.resolve(args.out or (cfg.paths.get("out", "out") + "/radar.csv"))
    judge = json.loads(judge_path.read_text(encoding="utf-8"))
    if _plan(args, [f"export {sum(len(v) for v in judge.values())} judge scores", f"write {out_path}"]):
        return 0
    eval_metrics.write_radar_csv(out_path, judge)
    print(f"radar data -> {out_path}")
    return 0


def cmd_codec(args, cfg: PipelineConfig) -> int:
    num_bins = int(cfg.codec.get("num_bins", 1000))
    simplify_eps = float(cfg.codec.get("simplify_eps", 0.0))
    if args.codec_op == "encode":
        mask_path = cfg.resolve(_require(args.mask, "--mask"))
        if _plan(args, [f"encode {mask_path} with num_bins={num_bins}, simplify_eps={simplify_eps}"]):
            return 0
        mask = load_mask(mask_path)
        text = render_token_text(mask_to_tokens(mask, simplify_eps, num_bins))
        if args.out:
            out_path = cfg.resolve(args.out)
            out_path.parent.mkdir(parents=True, exist_ok=True)
            out_path.write_text(
                json.dumps({"width": mask.width, "height": mask.height, "tokens": text}, sort_keys=True) + "\n",
                encoding="utf-8",
            )
            print(f"tokens -> {out_path}")
        else:
            print(text)
        return 0
    # decode
    tokens_path = cfg.resolve(_require(args.tokens, "--tokens"))
    out_path = cfg.resolve(_require(args.out, "--out"))
    payload = json.loads(tokens_path.read_text(encoding="utf-8"))
    if "tokens" not in payload:
        raise DatasetError(f"{tokens_path} has no 'tokens' field")
    width = args.width or payload.get("width")
    height = args.height or payload.get("height")
    if not width or not height:
        raise _UsageError("decode needs --width/--height or a tokens file that records them")
    if _plan(args, [f"decode {tokens_path} onto {width}x{height}", f"write {out_path}"]):
        return 0
    seq = parse_token_text(payload["tokens"], num_bins)
    save_mask(tokens_to_mask(seq, int(width), int(height)), out_path)
    print(f"mask -> {out_path}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="medico-vqa", description=__doc__)
    parser.add_argument("--config", help="pipeline config file (TOML)")
    parser.add_argument("--dry-run", action="store_true", help="validate and print the plan, write nothing")
    parser.add_argument("--workers", type=int, default=4, help="forge/eval parallelism (default 4)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("forge-explanations", help="synthesize the explanation dataset")
    p.add_argument("--qa")
    p.add_argument("--out")
    p.set_defaults(func=cmd_forge_explanations)

    p = sub.add_parser("forge-regions", help="build the text-to-region dataset")
    p.add_argument("--worklist")
    p.add_argument("--qa")
    p.add_argument("--images")
    p.add_argument("--out")
    p.set_defaults(func=cmd_forge_regions)

    p = sub.add_parser("assemble", help="combine datasets into multi-task examples")
    p.add_argument("--qa")
    p.add_argument("--explanations")
    p.add_argument("--regions")
    p.add_argument("--images")
    p.add_argument("--out")
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("split", help="image-level train/val split")
    p.add_argument("--in", dest="infile")
    p.add_argument("--out")
    p.add_argument("--ratio", type=float, default=0.8)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="fine-tune through the model adapter")
    p.add_argument("--train")
    p.add_argument("--val")
    p.add_argument("--runs")
    p.add_argument("--adapter", choices=["toy", "http"])
    p.add_argument("--state", help="toy adapter state file")
    p.add_argument("--backend-url")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run subtask 1 or the two-step subtask 2")
    p.add_argument("--subtask", type=int, choices=[1, 2], required=True)
    p.add_argument("--in", dest="infile")
    p.add_argument("--images")
    p.add_argument("--out")
    p.add_argument("--adapter", choices=["toy", "http"])
    p.add_argument("--state")
    p.add_argument("--backend-url")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="score predictions against references")
    p.add_argument("--pred")
    p.add_argument("--ref")
    p.add_argument("--out")
    p.add_argument("--ingested", help="JSON file of externally computed scores to pass through")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("radar", help="export judge scores as radar-chart CSV")
    p.add_argument("--judge")
    p.add_argument("--out")
    p.set_defaults(func=cmd_radar)

    p = sub.add_parser("codec", help="mask <-> location-token conversion")
    codec_sub = p.add_subparsers(dest="codec_op", required=True, parser_class=_Parser)
    enc = codec_sub.add_parser("encode")
    enc.add_argument("--mask")
    enc.add_argument("--out")
    enc.set_defaults(func=cmd_codec)
    dec = codec_sub.add_parser("decode")
    dec.add_argument("--tokens")
    dec.add_argument("--width", type=int)
    dec.add_argument("--height", type=int)
    dec.add_argument("--out")
    dec.set_defaults(func=cmd_codec)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig.default()
        return args.func(args, cfg)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, DatasetError, ContractError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 1
    except (PipelineError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
