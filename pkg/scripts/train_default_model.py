"""Train the segmenter bundled with the package from a synthetic rendered corpus.

    python3 scripts/train_default_model.py [--seed 0] [--out src/soilpick/data/default_segmenter.json]
"""
import argparse
import json
import time
from pathlib import Path

from soilpick.config import DEFAULT_MODEL
from soilpick.experiment import run_vision_eval
from soilpick.vision import SynthConfig, TrainConfig, split_dataset, synthesize_dataset, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=DEFAULT_MODEL)
    args = ap.parse_args()

    t0 = time.perf_counter()
    imgs = synthesize_dataset(SynthConfig(), args.seed)
    split = split_dataset(imgs, seed=args.seed)
    model = train(split, TrainConfig(seed=args.seed))
    # keep the bundled file small: the loss history is not needed at runtime
    model.train_stats.pop("loss_history", None)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    model.save(args.out)
    scores = {k: v.to_dict() for k, v in run_vision_eval(split, model).items()}
    print(json.dumps({"model": str(args.out), "seconds": round(time.perf_counter() - t0, 1), **scores}))


if __name__ == "__main__":
    main()
