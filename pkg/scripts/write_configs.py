"""Regenerate configs/*.json from the dataclass defaults plus the per-scenario overrides below."""
import json
from dataclasses import replace
from pathlib import Path

from soilpick.config import Scenario

OUT = Path(__file__).resolve().parents[1] / "configs"


def dump(s: Scenario, name: str) -> None:
    d = s.to_dict()
    d.pop("segmenter_path")  # fall back to the bundled model
    (OUT / name).write_text(json.dumps(d, indent=2) + "\n")


def main():
    OUT.mkdir(exist_ok=True)
    base = Scenario(name="paper_defaults")
    dump(base, "paper_defaults.json")
    dump(replace(base, name="no_rocks", terrain=replace(base.terrain, rock_fraction=0.0),
                 grasp=replace(base.grasp, deadlock_prob_per_plan=0.03)), "no_rocks.json")
    dump(replace(base, name="rocks", base_seed=100, terrain=replace(base.terrain, rock_fraction=0.3),
                 grasp=replace(base.grasp, deadlock_prob_per_plan=0.08)), "rocks.json")


if __name__ == "__main__":
    main()
