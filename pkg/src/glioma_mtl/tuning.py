"""Exhaustive hyperparameter grid search over a fixed train/validation split."""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import ConfigError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GridSpec:
    """Candidate values per axis; the field order is the lexicographic axis order."""

    dropout_rate: tuple = (0.15, 0.2, 0.25, 0.30, 0.35, 0.40)
    l2: tuple = (1e-4, 1e-5, 1e-6)
    learning_rate: tuple = (1e-2, 1e-3, 1e-4, 1e-5, 1e-7)
    weight_decay: tuple = (1e-3, 1e-4, 1e-5)
    augmentation_factor: tuple = (1, 2, 3)
    augmentation_probability: tuple = (0.25, 0.30, 0.35, 0.40, 0.45)

    def __post_init__(self):
        for f in fields(self):
            values = getattr(self, f.name)
            if isinstance(values, (int, float)):
                values = (values,)
            values = tuple(values)
            if not values:
                raise ConfigError(f"grid axis {f.name!r} is empty")
            object.__setattr__(self, f.name, values)

    @classmethod
    def axes(cls):
        return tuple(f.name for f in fields(cls))

    @property
    def size(self):
        return int(np.prod([len(getattr(self, a)) for a in self.axes()]))

    def points(self):
        """Grid points as dicts, in cartesian-product (lexicographic) order."""
        names = self.axes()
        for combo in itertools.product(*(getattr(self, a) for a in names)):
            yield dict(zip(names, combo))


SELECTED_POINT = {"dropout_rate": 0.25, "l2": 1e-5, "learning_rate": 1e-5,
                  "weight_decay": 1e-5, "augmentation_factor": 2,
                  "augmentation_probability": 0.35}


def split_dataset(dataset, val_fraction=0.15, seed=0):
    """Shuffle with a fixed seed and split into ``(train, validation)``."""
    dataset = list(dataset)
    if len(dataset) < 2:
        raise ConfigError("need at least two cases to split")
    n_val = min(max(1, int(round(len(dataset) * val_fraction))), len(dataset) - 1)
    order = np.random.default_rng(seed).permutation(len(dataset))
    val = [dataset[i] for i in sorted(order[:n_val])]
    train = [dataset[i] for i in sorted(order[n_val:])]
    return train, val


def _run_point(args):
    train_fn, point, train, val = args
    return float(train_fn(point, train, val))


def grid_search(grid: GridSpec, dataset=None, train_fn=None, split=None, workers=1,
                val_fraction=0.15, seed=0):
    """Train once per grid point and pick the lowest validation loss.

    ``train_fn(point, train, val)`` returns the un-augmented validation loss.
    Pass either ``dataset`` (split 85/15 with ``seed``) or a ready ``split``.
    Returns ``(best_point, leaderboard)``; the leaderboard rows are sorted by
    loss, with ties going to the earlier point in product order.
    """
    if grid is None or grid.size == 0:
        raise ConfigError("grid is empty")
    if train_fn is None:
        raise ConfigError("grid_search needs a train_fn")
    train, val = split if split is not None else split_dataset(dataset, val_fraction, seed)
    points = list(grid.points())
    jobs = [(train_fn, p, train, val) for p in points]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            losses = list(pool.map(_run_point, jobs))
    else:
        losses = []
        for i, job in enumerate(jobs):
            losses.append(_run_point(job))
            log.info("grid point %d/%d %s -> %.6g", i + 1, len(jobs), job[1], losses[-1])
    board = [dict(rank=0, index=i, val_loss=loss, **p)
             for i, (p, loss) in enumerate(zip(points, losses))]
    # NaN losses sort last
    board.sort(key=lambda r: (not np.isfinite(r["val_loss"]), r["val_loss"], r["index"]))
    for rank, row in enumerate(board, 1):
        row["rank"] = rank
    best = {a: board[0][a] for a in GridSpec.axes()}
    return best, board


def psnet_trainer(network_spec, train_config, augment_config=None):
    """A ``train_fn`` that trains a PS-Net per grid point and returns its
    validation loss. The point overrides dropout, l2, learning rate, weight
    decay and the augmentation factor and probability."""
    return _PSNetPoint(network_spec, train_config, augment_config)


class _PSNetPoint:
    def __init__(self, network_spec, train_config, augment_config):
        self.network_spec = network_spec
        self.train_config = train_config
        self.augment_config = augment_config

    def __call__(self, point, train_samples, val_samples):
        from .augment import AugmentConfig
        from .network import NetworkSpec, build_psnet
        from .trainer import evaluate_loss, train

        spec = NetworkSpec.from_json(self.network_spec.to_json())
        spec.dropout_rate = point["dropout_rate"]
        spec.l2_strength = point["l2"]
        config = replace(self.train_config, initial_lr=point["learning_rate"],
                         weight_decay=point["weight_decay"])
        aug = replace(self.augment_config or AugmentConfig(),
                      factor=int(point["augmentation_factor"]),
                      probability=point["augmentation_probability"])
        model = build_psnet(spec, seed=config.seed)
        result = train(model, train_samples, val_samples, config, aug)
        loss, _ = evaluate_loss(result.model, val_samples, result.loss_fn, config.virtual_batch)
        return loss
