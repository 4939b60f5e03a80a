"""Outdoor counting with a dropout oracle: empirical pod MAE vs the exact binomial expectation."""
import argparse
import math

import numpy as np

from podcount.evaluation import CountSeries, mae
from podcount.fields import FieldSceneConfig, make_field_scene
from podcount.pipelines import DropoutOracle, Sample, count_outdoor


def expected_abs_error(n: int, keep: float) -> float:
    return sum(math.comb(n, k) * keep**k * (1 - keep) ** (n - k) * abs(k - n) for k in range(n + 1))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--images", type=int, default=500)
    ap.add_argument("--pods", type=int, nargs=2, default=(55, 65))
    ap.add_argument("--p", type=float, nargs="+", default=[0.0, 0.05, 0.1, 0.2, 0.4])
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    cfg = FieldSceneConfig(pods_per_image=tuple(a.pods))
    scenes = [make_field_scene(np.random.default_rng([a.seed, k]), cfg, f"im{k}") for k in range(a.images)]
    recs = {rec.image_id: rec for rec, _ in scenes}
    print("p      empirical MAE   exact E|X-n|")
    for p in a.p:
        det = DropoutOracle(recs, p=p, seed=a.seed)
        pairs = [(r.image_id, count_outdoor(Sample(r.image_id, px), det).pod_count, r.ground_truth().pod_count) for r, px in scenes]
        want = np.mean([expected_abs_error(r.ground_truth().pod_count, 1 - p) for r, _ in scenes])
        print(f"{p:<6.2f} {mae(CountSeries(tuple(pairs))):13.3f} {want:14.3f}")


if __name__ == "__main__":
    main()
