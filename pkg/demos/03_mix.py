"""
Mix: augmenting a bag with a same-class key bag
===============================================

For every query prototype the closest key prototype is found; with
probability p an operator fires. Four operators, plus "joint", which chains
them in order.
"""
import numpy as np

from remix.mixer import AugmentConfig, KeyIndex, mix_bag, sample_gaussian_from_cov
from remix.reducer import BagDictionary

rng = np.random.default_rng(0)
d = 2


def toy(bag_id, centre):
    c = np.asarray(centre) + 0.3 * rng.standard_normal((3, d))
    cov = np.stack([0.05 * np.eye(d)] * 3)
    return BagDictionary(bag_id, 0, c, np.array([10, 10, 10]), "full", cov)


bags = {"query": toy("query", [0, 0]), "key": toy("key", [1, 1])}
index = KeyIndex.from_labels({b: 0 for b in bags})
np.set_printoptions(precision=3, suppress=True)
print("query prototypes\n", bags["query"].centroids)
print("key prototypes\n", bags["key"].centroids)

for kind in ("append", "replace", "interpolate", "covary", "joint"):
    cfg = AugmentConfig(kind, p=1.0 if kind != "joint" else 0.5)
    mixed = mix_bag(bags["query"], index, bags, cfg, np.random.default_rng(1))
    print(f"\n{kind}: {mixed.n_instances} rows, events "
          + ", ".join(f"{e.kind}({e.query_idx}->{e.key_idx})" for e in mixed.events))
    print(mixed.instances)

# the covary operator samples from the key cluster's covariance
sigma = np.array([[1.0, 0.8], [0.8, 1.0]])
draws = np.array([sample_gaussian_from_cov(sigma, "full", rng) for _ in range(20_000)])
print("\nempirical covariance of 20k draws\n", np.cov(draws.T))
