"""Reduce-and-mix pipeline for multiple instance learning on bag features.

Modules:

* :mod:`remix.bagstore`  bag model, RMX1 files, manifests, synthetic data
* :mod:`remix.reducer`   per-bag K-Means into prototype dictionaries (RMXR)
* :mod:`remix.mixer`     same-class latent bag mixing
* :mod:`remix.milnet`    ABMIL / DSMIL with analytic gradients, Adam, cosine rate
* :mod:`remix.trainer`   training loop, evaluation, repeated runs
* :mod:`remix.bench`     paired full-bag vs reduced-bag budget benchmark
* :mod:`remix.cli`       ``remix`` command
"""
from .bagstore import FeatureBag, BagManifest, SynthConfig, read_bag, write_bag, read_manifest
from .reducer import BagDictionary, ReduceConfig, kmeans_fit, reduce_bag, reduce_dataset
from .mixer import AugmentConfig, KeyIndex, MixedBag, mix_bag
from .milnet import MilModel, init_params
from .trainer import TrainConfig, EvalReport, train, evaluate, run_repeated

__version__ = "0.1.0"
