"""Latency of fusion vs dual-encoder inference over a grid of visual token counts.

    python3 scripts/bench_latency.py --visual 16 60 240 --texts-per-image 1 5 10
"""

import argparse
from dataclasses import replace

from dualdistill import config as configmod
from dualdistill.experiments import CONFIG_DIR
from dualdistill.serve import measure_latency


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=str(CONFIG_DIR / "bench.json"))
    p.add_argument("--visual", type=int, nargs="+", default=[16, 60, 240])
    p.add_argument("--texts-per-image", type=int, nargs="+", default=[1, 5, 10])
    p.add_argument("--no-cache", action="store_true")
    args = p.parse_args()

    base = configmod.load(args.config).bench
    print(f"{'N':>5} {'M':>4} {'texts/img':>9} {'fusion ms':>10} {'dual ms':>8} {'cache ms':>9} {'online x':>9} {'total x':>8}")
    for n in args.visual:
        for t in args.texts_per_image:
            sc = replace(base, num_visual_tokens=n, texts_per_image=t, use_cache=not args.no_cache)
            r = measure_latency(sc)
            print(f"{n:5d} {sc.num_text_tokens:4d} {t:9d} {1e3 * r.fusion_online:10.1f} {1e3 * r.dual_online:8.1f} "
                  f"{1e3 * r.offline_cache:9.1f} {r.speedup:9.2f} {r.total_speedup:8.2f}")


if __name__ == "__main__":
    main()
