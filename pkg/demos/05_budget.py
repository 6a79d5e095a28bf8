"""
Training budget: full bags against prototypes
=============================================

Both representations are streamed from disk one bag at a time with the same
seeds and bag order. Time is the mean of the epochs after a warm-up one;
memory is the peak number of feature bytes resident at once.
"""
import json
import tempfile
from pathlib import Path

from remix.bagstore import SynthConfig, generate_synthetic_dataset
from remix.bench import run_bench
from remix.reducer import ReduceConfig, reduce_dataset

out = Path(tempfile.mkdtemp(prefix="remix-demo-"))
full, _ = generate_synthetic_dataset(
    SynthConfig(dim=128, bags_per_class=20, test_bags_per_class=0, n_min=1000, n_max=3000, seed=2),
    out / "data")
reduced = reduce_dataset(full, ReduceConfig(k=8, seed=2), out / "red")

report = run_bench(full, reduced, model="abmil", epochs=3)
print(json.dumps(report.to_dict(), indent=2))
print(f"\n{report.time_ratio:.1f}x faster per epoch, {report.memory_ratio:.0f}x less bag memory")
