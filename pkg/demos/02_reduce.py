"""
Reduce: from hundreds of instances to a handful of prototypes
=============================================================

Every bag is clustered on its own with K-Means. The centroid matrix, the
cluster sizes and a covariance summary per cluster replace the raw features.
"""
import tempfile
from pathlib import Path

import numpy as np

from remix.bagstore import SynthConfig, dataset_stats, generate_synthetic_dataset, read_bag
from remix.reducer import ReduceConfig, kmeans_fit, read_dictionary, reduce_dataset

out = Path(tempfile.mkdtemp(prefix="remix-demo-"))
train, _ = generate_synthetic_dataset(
    SynthConfig(dim=32, bags_per_class=10, test_bags_per_class=0, seed=1), out / "data")

# a single bag first: the inertia trace never goes up
bag = read_bag(train.resolve(train.entries[0]))
centroids, result = kmeans_fit(bag.features, ReduceConfig(k=8, seed=0))
print("inertia per Lloyd step:", np.round(result.inertia_history, 2))
print("cluster sizes:", np.bincount(result.assignments).tolist())

# the whole split, in parallel; per-bag seeds keep this thread-count independent
reduced = reduce_dataset(train, ReduceConfig(k=8, cov_mode="full", seed=0), out / "red")
before, after = dataset_stats(train), dataset_stats(reduced)
print(f"\ninstances {before.total_instances} -> {after.total_instances}, "
      f"ratio {before.total_instances / after.total_instances:.1f}")

d = read_dictionary(reduced.resolve(reduced.entries[0]))
print(f"{d.bag_id}: centroids {d.centroids.shape}, counts {d.counts.tolist()}, "
      f"covariances {d.covariances.shape} ({d.cov_mode})")
disk = sum(reduced.resolve(e).stat().st_size for e in reduced.entries)
raw = sum(train.resolve(e).stat().st_size for e in train.entries)
print(f"bytes on disk: {raw} -> {disk}")
