"""Run the desk-scale ablations against one shared teacher and print median tables.

    python3 scripts/run_ablation.py knowledge mapping stages retrieval --out runs/ablation
"""

import argparse
import json
import logging
from pathlib import Path

from dualdistill import experiments as ex
from dualdistill.models import FusionTeacher
from dualdistill.pipeline import load_checkpoint, save_checkpoint

FAMILIES = {
    "knowledge": (ex.knowledge_ablation, "accuracy"),
    "mapping": (ex.layer_mapping_ablation, "accuracy"),
    "stages": (ex.stage_grid, "accuracy"),
    "retrieval": (ex.retrieval_ablation, "image_R@1"),
}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("families", nargs="*", default=list(FAMILIES), choices=list(FAMILIES))
    p.add_argument("--configs", default=str(ex.CONFIG_DIR), help="directory holding the presets")
    p.add_argument("--teacher", default=None, help="reuse this teacher checkpoint instead of training one")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--out", default="runs/ablation")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    protocol = ex.Protocol.from_presets(args.configs, args.seeds)
    if args.teacher:
        teacher = FusionTeacher(protocol.model)
        load_checkpoint(args.teacher, teacher)
    else:
        teacher, report = ex.shared_teacher(protocol)
        save_checkpoint(out / "teacher.ckpt", teacher, header={"final": report.summary["final"]})
        print(f"teacher: {report.summary['final']}")

    results = {}
    for family in args.families:
        build, metric = FAMILIES[family]
        grid = build(protocol, teacher, ex.Grid())
        print(f"\n== {family} ({metric}) ==\n{grid.table(metric)}")
        results[family] = {name: [r.metrics | {"seed": r.seed, "ca_layer_pairs": r.ca_layer_pairs} for r in runs]
                           for name, runs in grid.runs.items()}
    (out / "results.json").write_text(json.dumps(results, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
