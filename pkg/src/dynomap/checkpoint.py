"""Trained-model checkpoints: parameter container plus everything needed to
re-render or attribute new data (feature order, classes, scaling stats)."""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import ScalingStats
from .diffcore import load_params, save_params
from .model import NetConfig


@dataclass
class Checkpoint:
    params: object
    net_config: NetConfig
    feature_names: list
    class_names: list
    stats: ScalingStats = None
    freeze_epoch: int = None
    selected_epoch: int = None
    train_config: dict = None

    def save(self, directory):
        meta = {
            "net_config": self.net_config.to_dict(),
            "feature_names": list(self.feature_names),
            "class_names": list(self.class_names),
            "freeze_epoch": self.freeze_epoch,
            "selected_epoch": self.selected_epoch,
            "train_config": self.train_config,
        }
        if self.stats is not None:
            meta["scaling"] = {
                "feature_names": list(self.stats.feature_names),
                "mu": np.asarray(self.stats.mu).tolist(),
                "sigma": np.asarray(self.stats.sigma).tolist(),
            }
        return save_params(self.params, directory, extra=meta)

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        if not (directory / "manifest.json").exists():
            raise FileNotFoundError(f"no checkpoint manifest in {directory}")
        params, meta = load_params(directory)
        stats = None
        if "scaling" in meta:
            s = meta["scaling"]
            stats = ScalingStats(s["feature_names"], np.asarray(s["mu"]), np.asarray(s["sigma"]))
        return cls(
            params=params,
            net_config=NetConfig.from_dict(meta["net_config"]),
            feature_names=meta["feature_names"],
            class_names=meta["class_names"],
            stats=stats,
            freeze_epoch=meta.get("freeze_epoch"),
            selected_epoch=meta.get("selected_epoch"),
            train_config=meta.get("train_config"),
        )
