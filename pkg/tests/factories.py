"""Random instance builders shared by unit and acceptance tests."""

import numpy as np

from dbtkit.dataset import Box2D, CohortEntry, GroundTruthLesion, Prediction, VolumeKey, VolumeMeta
from dbtkit.phantom import volume_key_for


def random_froc_instance(rng, max_volumes=5, max_preds=10, max_gts=4):
    n_vol = int(rng.integers(1, max_volumes + 1))
    volumes = [
        VolumeMeta(*volume_key_for(int(i)), window_center=2048, window_width=4096,
                   slices=int(rng.integers(4, 30)), rows=400, cols=300)
        for i in rng.choice(12, size=n_vol, replace=False)
    ]
    gts = []
    for _ in range(int(rng.integers(1, max_gts + 1))):
        v = volumes[int(rng.integers(n_vol))]
        w, h = rng.uniform(10, 300, size=2)
        gts.append(GroundTruthLesion(v.key, Box2D(*rng.uniform(0, 250, size=2), w, h),
                                     int(rng.integers(v.slices)), "cancer", "mass"))
    preds = []
    for _ in range(int(rng.integers(0, max_preds + 1))):
        v = volumes[int(rng.integers(n_vol))]
        w, h = rng.uniform(10, 200, size=2)
        # coarse scores so ties are common
        score = float(rng.integers(1, 11)) / 10
        preds.append(Prediction(v.key, Box2D(*rng.uniform(0, 250, size=2), w, h),
                                int(rng.integers(v.slices)), score))
    return preds, gts, volumes


def random_predictions(rng, n, extent=200.0, key=VolumeKey("P", "S", "L", "CC")):
    preds = []
    for _ in range(n):
        w, h = rng.uniform(5, 80, size=2)
        preds.append(Prediction(key, Box2D(*rng.uniform(0, extent, size=2), w, h), 0,
                                float(rng.uniform(0.01, 1.0))))
    return preds


def random_cohort(rng, sizes=None, max_lesions=3):
    """Cohort with random group sizes; benign/cancer patients carry 1..max_lesions lesions."""
    sizes = sizes or {g: int(rng.integers(lo, hi)) for g, (lo, hi) in
                      {"normal": (10, 60), "actionable": (5, 20),
                       "benign": (10, 40), "cancer": (10, 40)}.items()}
    entries = []
    study = 0
    for group, n in sizes.items():
        for i in range(n):
            n_studies = int(rng.integers(1, 4))
            studies = tuple(f"ST{study + k}" for k in range(n_studies))
            study += n_studies
            kinds = ()
            if group in ("benign", "cancer"):
                # mostly single lesions, as in clinical data
                count = 1 if rng.random() < 0.7 else int(rng.integers(1, max_lesions + 1))
                kinds = tuple("mass" if rng.random() < 0.75 else "AD" for _ in range(count))
            entries.append(CohortEntry(f"{group[:2]}{i:04d}", group, studies, kinds))
    return entries
