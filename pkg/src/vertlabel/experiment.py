"""Desk-scale experiment protocol shared by the CLI, demos and acceptance tests.

Phantoms are split by seed into training, validation and held-out test scans;
each split is cut into a fixed list of crops once, so every mode or head
variant trains on identical data.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .data import PhantomSpec, phantom_scans, sample_crops
from .evaluation import (crop_localization_errors, crop_probabilities, identification_metrics,
                         mean_average_precision, predict_scan)
from .nn import ModelConfig
from .training import CropDataset, TrainConfig, train

log = logging.getLogger(__name__)

TEST_SEED_OFFSET = 1000


@dataclass
class DeskSetup:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    num_phantoms: int = 40   # training + validation
    num_val: int = 4
    num_test: int = 8
    crops_per_scan: int = 8
    target_spacing: float = 2.0  # isotropic mm after resampling
    model: ModelConfig = field(default_factory=lambda: ModelConfig(
        crop_shape=(32, 24, 24), num_classes=6, base_channels=8, lstm_hidden=32,
        dtype="float32"))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-3))
    epochs: int = 12
    seed: int = 0

    def with_model(self, **changes):
        return dataclasses.replace(self, model=dataclasses.replace(self.model, **changes))

    def with_train(self, **changes):
        return dataclasses.replace(self, train=dataclasses.replace(self.train, **changes))


class DeskData:
    """Scans and crop lists for one :class:`DeskSetup`, generated lazily."""

    def __init__(self, setup: DeskSetup):
        self.setup = setup

    @cached_property
    def scans(self):
        s = self.setup
        return phantom_scans(s.phantom, range(s.seed * 10_000, s.seed * 10_000 + s.num_phantoms),
                             s.target_spacing)

    @cached_property
    def test_scans(self):
        s = self.setup
        start = s.seed * 10_000 + TEST_SEED_OFFSET
        return phantom_scans(s.phantom, range(start, start + s.num_test), s.target_spacing)

    def _crops(self, scans, stream):
        s = self.setup
        return sample_crops(scans, s.model.crop_shape, s.crops_per_scan, [s.seed, stream],
                            s.model.num_classes)

    @cached_property
    def dataset(self):
        n_train = len(self.scans) - self.setup.num_val
        return CropDataset(self._crops(self.scans[:n_train], 1), self._crops(self.scans[n_train:], 2))

    @cached_property
    def test_crops(self):
        return self._crops(self.test_scans, 3)


def train_setup(setup: DeskSetup, data: DeskData | None = None, out_dir=None):
    data = DeskData(setup) if data is None else data
    log.info("training %s/%s for %d epochs", setup.model.mode, setup.model.cls_head, setup.epochs)
    return train(setup.model, setup.train, data.dataset, setup.epochs, seed=setup.seed,
                 out_dir=out_dir)


def localization_errors(model, data: DeskData):
    """Crop-level localization errors (mm) on the held-out crops."""
    return crop_localization_errors(model, data.test_crops, data.setup.target_spacing)


def classification_map(model, data: DeskData):
    probs, truths = crop_probabilities(model, data.test_crops)
    return mean_average_precision(probs, truths)[0]


def scan_metrics(model, data: DeskData, stride=None):
    """Whole-scan identification metrics on the held-out phantoms."""
    preds = [predict_scan(vol, model, stride=stride) for vol, _ in data.test_scans]
    report = identification_metrics(preds, [labels for _, labels in data.test_scans])
    report.map_score = classification_map(model, data)
    return report


def run_ablation(setup: DeskSetup, modes=("integral", "direct_fc", "heatmap_argmax"),
                 data: DeskData | None = None, trained=None):
    """Train each localization mode on identical data and seed.

    Returns ``[(mode, mean_mm, std_mm)]`` of held-out crop localization
    error.  ``trained`` may map a mode to an already trained model.
    """
    data = DeskData(setup) if data is None else data
    trained = {} if trained is None else trained
    rows = []
    for mode in modes:
        model = trained.get(mode)
        if model is None:
            model = train_setup(setup.with_model(mode=mode), data).checkpoint.build_model()
        errs = localization_errors(model, data)
        rows.append((mode, float(np.mean(errs)), float(np.std(errs))))
    return rows
