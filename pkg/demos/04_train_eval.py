"""
Training an attention MIL model on prototypes
=============================================

ABMIL pools a bag with learned attention; DSMIL fuses a critical-instance
score with a similarity-weighted bag score. Both train one bag per step with
Adam and a cosine learning rate.
"""
import tempfile
from pathlib import Path

from remix.bagstore import SynthConfig, generate_synthetic_dataset
from remix.mixer import AugmentConfig
from remix.reducer import ReduceConfig, reduce_dataset
from remix.trainer import TrainConfig, evaluate, run_repeated, train

out = Path(tempfile.mkdtemp(prefix="remix-demo-"))
cfg = SynthConfig(dim=32, bags_per_class=50, test_bags_per_class=25, n_min=200, n_max=400,
                  evidence_fraction=0.1, seed=3)
train_full, test_full = generate_synthetic_dataset(cfg, out / "data")
rcfg = ReduceConfig(k=8, cov_mode="full", seed=3)
train_red = reduce_dataset(train_full, rcfg, out / "red")
test_red = reduce_dataset(test_full, rcfg, out / "red")

state = train(train_red, TrainConfig(model="abmil", epochs=20, augment=AugmentConfig("interpolate")))
for log in state.logs[::5]:
    print(f"epoch {log.epoch:2d}  loss {log.loss:.4f}  lr {log.lr:.2e}")
print(evaluate(state.model, test_red).to_json())

# a few seeds per augmentation, mean and spread of the averaged metric
for kind in ("none", "append", "covary"):
    report = run_repeated(train_red, test_red,
                          TrainConfig(model="dsmil", epochs=20, augment=AugmentConfig(kind)), n=3)
    print(f"dsmil {kind:8s} average {report.average:.3f} +- {report.std['average']:.3f}")
