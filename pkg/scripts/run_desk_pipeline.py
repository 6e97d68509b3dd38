#!/usr/bin/env python3
"""Run the full pipeline at desk scale in ./desk_run/.

Builds the synthetic corpus, then drives every CLI stage with mock clients
and the toy adapter: forge explanations and regions, assemble, split, train,
two-step inference, evaluation, and the radar export. Everything is
deterministic; rerunning the script reproduces the same outputs.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

from medico_vqa.cli import main as cli
from medico_vqa.fixtures import SHOWCASE_IMAGE_ID, build_desk_corpus, build_eval_refs

STAGES = [
    ["forge-explanations", "--qa", "qa.jsonl"],
    ["forge-regions", "--worklist", "worklist.jsonl", "--qa", "qa.jsonl"],
    ["assemble", "--qa", "qa.jsonl", "--explanations", "out/explanations.jsonl",
     "--regions", "out/regions.jsonl"],
    ["split", "--in", "out/multitask.jsonl"],
    ["train", "--train", "out/train.jsonl", "--val", "out/val.jsonl",
     "--state", "out/toy_state.json"],
    ["infer", "--subtask", "2", "--in", "eval.jsonl", "--state", "out/toy_state.json"],
]


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--root", default="desk_run", help="working directory (default desk_run)")
    parser.add_argument("--fresh", action="store_true", help="delete the working directory first")
    args = parser.parse_args()

    root = Path(args.root)
    if args.fresh and root.exists():
        shutil.rmtree(root)
    corpus = build_desk_corpus(root)
    config = ["--config", str(corpus.config_file)]

    for stage in STAGES:
        print(f"\n== medico-vqa {' '.join(stage)}")
        rc = cli(config + stage)
        if rc != 0:
            return rc

    out = root / "out"
    build_eval_refs(corpus.eval_file, corpus.qa_file, out / "regions.jsonl", out / "refs.jsonl")
    for stage in (
        ["evaluate", "--pred", "out/predictions.jsonl", "--ref", "out/refs.jsonl",
         "--out", "out/report.json"],
        ["radar", "--judge", "judge_scores.json", "--out", "out/radar.csv"],
    ):
        print(f"\n== medico-vqa {' '.join(stage)}")
        rc = cli(config + stage)
        if rc != 0:
            return rc

    preds = {
        json.loads(line)["sample_id"]: json.loads(line)
        for line in (out / "predictions.jsonl").read_text().splitlines()
    }
    showcase = preds[f"eval-{SHOWCASE_IMAGE_ID}"]
    print("\n== spotlight sample")
    print(f"question:    {showcase['question']}")
    print(f"answer:      {showcase['answer']}")
    print(f"mask:        {showcase.get('mask_path', '(none)')}")
    print(f"confidence:  {showcase.get('confidence'):.4f}")
    print(f"explanation: {showcase.get('explanation', '(none)')[:120]}...")
    print(f"\nall outputs under {out}/")
    return 0


if __name__ == "__main__":
    sys.exit(main())
