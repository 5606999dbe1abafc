"""Pooled vision metrics on a synthetic corpus plus the augmentation ablation.

    python3 scripts/run_vision_study.py [--seed 0] [--out results/vision]
"""
import argparse
import json
from pathlib import Path

from soilpick.experiment import ablation_csv, ablation_split, metrics_csv, run_ablation, run_vision_eval
from soilpick.vision import SynthConfig, TrainConfig, split_dataset, synthesize_dataset, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--count", type=int, default=150)
    ap.add_argument("--out", type=Path, default=Path("results/vision"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    split = split_dataset(synthesize_dataset(SynthConfig(count=args.count), args.seed), seed=args.seed)
    model = train(split, TrainConfig(seed=args.seed))
    scores = run_vision_eval(split, model)
    (args.out / "metrics.csv").write_text(metrics_csv([("segmenter", k, v) for k, v in scores.items()]))

    # orientation-coded texture, upright training images, rotated hold-out
    rows = run_ablation(ablation_split(seed=args.seed), TrainConfig(seed=args.seed), [{"augment": False}])
    (args.out / "ablation.csv").write_text(ablation_csv(rows))
    (args.out / "ablation.json").write_text(json.dumps([r.to_dict() for r in rows], indent=2) + "\n")

    print(json.dumps({"test": scores["test"].to_dict(), "validation": scores["validation"].to_dict(),
                      "augment_off_validation_accuracy_delta": rows[1].deltas["validation"].accuracy}, sort_keys=True))


if __name__ == "__main__":
    main()
