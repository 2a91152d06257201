"""Run configuration: one INI file with sections, typed values and dotted overrides.

Values are parsed as Python literals where possible (``1e-5``, ``(32, 32, 32)``,
``true``) and kept as strings otherwise. Keys without a default are required;
asking for a missing one raises :class:`ConfigError` naming ``[section] key``.
"""

from __future__ import annotations

import ast
import configparser
import io
from pathlib import Path

from .errors import ConfigError

REQUIRED = object()

SCHEMA = {
    "data": {
        "run_dir": REQUIRED,
        "raw": "",
        "truth_labels": "",
        "test_fraction": 0.2,
        "val_fraction": 0.15,
        "split_seed": 0,
    },
    "synth": {
        "n": 200,
        "seed": REQUIRED,
        "shape": (32, 32, 32),
        "lesion_radius": (4.0, 8.0),
        "margin": 1.5,
        "noise_std": 0.2,
        "missing_idh": 0.55,
        "missing_codeletion": 0.70,
        "missing_grade": 0.22,
        "missing_segmentation": 0.0,
    },
    "preprocess": {
        "brain_mask": "",
        "target_crop": "brain_mask_bbox",
        "normalization_epsilon": 1e-8,
        "smooth_training_masks": False,
        "store_float16": False,
        "registration": "",
        "bias_correction": "",
        "skull_strip": "",
    },
    "network": {
        "depths": 3,
        "base_filters": 8,
        "filter_schedule": "",
        "stem_kernel": 9,
        "stem_stride": 3,
        "conv_kernel": 3,
        "dropout_rate": 0.1,
        "l2_strength": 0.0,
    },
    "augment": {
        "probability": 0.0,
        "factor": 1,
        "crop_max": 4,
        "rotation_max_deg": 30.0,
        "brightness_max": 0.2,
        "contrast_range": (0.85, 1.15),
        "seed": 0,
    },
    "train": {
        "initial_lr": REQUIRED,
        "weight_decay": REQUIRED,
        "seed": REQUIRED,
        "max_epochs": 150,
        "plateau_patience": 5,
        "plateau_factor": 0.25,
        "min_lr": 1e-11,
        "early_stop_window": 5,
        "virtual_batch": 8,
        "micro_batch": 1,
        "reduced_precision": False,
        "monitor": "train",
        "dice_reduction": "sum",
        "threads": 0,
    },
    "grid": {
        "dropout_rate": (0.15, 0.2, 0.25, 0.30, 0.35, 0.40),
        "l2": (1e-4, 1e-5, 1e-6),
        "learning_rate": (1e-2, 1e-3, 1e-4, 1e-5, 1e-7),
        "weight_decay": (1e-3, 1e-4, 1e-5),
        "augmentation_factor": (1, 2, 3),
        "augmentation_probability": (0.25, 0.30, 0.35, 0.40, 0.45),
        "workers": 1,
    },
    "gate": {
        "kind": "dice",
        "threshold": 0.7,
        "command": "",
        "max_rounds": 0,
    },
    "interpret": {
        "n_samples": 25,
        "noise_fraction": 0.15,
        "seed": 0,
    },
}


def _parse(text):
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


class RunConfig:
    """Parsed configuration; ``cfg["train"]["seed"]`` or ``cfg.get("train", "seed")``."""

    def __init__(self, values):
        self._values = values

    def get(self, section, key):
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key [{section}] {key}")
        value = self._values.get(section, {}).get(key, SCHEMA[section][key])
        if value is REQUIRED:
            raise ConfigError(f"missing config key [{section}] {key}")
        return value

    def __getitem__(self, section):
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        return _Section(self, section)

    def set(self, section, key, value):
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key [{section}] {key}")
        self._values.setdefault(section, {})[key] = value

    def section(self, name):
        """All keys of a section, raising on the first missing required one."""
        return {k: self.get(name, k) for k in SCHEMA[name]}

    def snapshot(self):
        """Every explicitly set or defaulted value; required-but-missing keys are omitted."""
        out = {}
        for name, keys in SCHEMA.items():
            out[name] = {}
            for k, default in keys.items():
                v = self._values.get(name, {}).get(k, default)
                if v is not REQUIRED:
                    out[name][k] = list(v) if isinstance(v, tuple) else v
        return out

    def to_ini(self):
        parser = configparser.ConfigParser(interpolation=None)
        for name, keys in self.snapshot().items():
            parser[name] = {k: _format(tuple(v) if isinstance(v, list) else v)
                            for k, v in keys.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()


class _Section:
    def __init__(self, cfg, name):
        self._cfg, self._name = cfg, name

    def __getitem__(self, key):
        return self._cfg.get(self._name, key)


def parse_config(text="", overrides=()):
    """Parse INI text, then apply ``section.key=value`` overrides in order."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc}") from exc
    values = {}
    for name in parser.sections():
        if name not in SCHEMA:
            raise ConfigError(f"unknown config section [{name}]")
        for key, raw in parser[name].items():
            if key not in SCHEMA[name]:
                raise ConfigError(f"unknown config key [{name}] {key}")
            values.setdefault(name, {})[key] = _parse(raw)
    cfg = RunConfig(values)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, raw = item.split("=", 1)
        section, key = dotted.strip().split(".", 1)
        cfg.set(section, key, _parse(raw))
    return cfg


def load_config(path=None, overrides=()):
    text = ""
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"configuration file not found: {path}")
        text = path.read_text()
    return parse_config(text, overrides)


# -- builders -----------------------------------------------------------------------

def _tuple3(value):
    if isinstance(value, (int, float)):
        return (value,) * 3
    return tuple(value)


def phantom_spec(cfg: RunConfig):
    from .synthdata import PhantomSpec

    s = cfg.section("synth")
    return PhantomSpec(shape=_tuple3(s["shape"]), lesion_radius=tuple(s["lesion_radius"]),
                       margin=float(s["margin"]), noise_std=float(s["noise_std"]),
                       missingness={"idh": s["missing_idh"], "codeletion": s["missing_codeletion"],
                                    "grade": s["missing_grade"],
                                    "segmentation": s["missing_segmentation"]},
                       seed=int(s["seed"]))


def preprocess_config(cfg: RunConfig):
    from .preprocess import EXTERNAL_STAGES, PreprocessConfig

    s = cfg.section("preprocess")
    return PreprocessConfig(
        external_stage_commands={k: s[k] for k in EXTERNAL_STAGES if s[k]},
        brain_mask_path=s["brain_mask"] or None, target_crop=s["target_crop"],
        normalization_epsilon=float(s["normalization_epsilon"]),
        smooth_training_masks=bool(s["smooth_training_masks"]))


def network_spec(cfg: RunConfig, input_shape):
    from .data_model import VOCABULARY
    from .network import NetworkSpec

    s = cfg.section("network")
    schedule = list(s["filter_schedule"]) if s["filter_schedule"] else None
    return NetworkSpec(
        input_shape=tuple(input_shape), depths=int(s["depths"]),
        base_filters=int(s["base_filters"]), filter_schedule=schedule,
        stem_kernel=_tuple3(s["stem_kernel"]), stem_stride=_tuple3(s["stem_stride"]),
        conv_kernel=_tuple3(s["conv_kernel"]), dropout_rate=float(s["dropout_rate"]),
        l2_strength=float(s["l2_strength"]),
        classification_heads={k: len(v) for k, v in VOCABULARY.items()})


def augment_config(cfg: RunConfig):
    from .augment import AugmentConfig

    s = cfg.section("augment")
    return AugmentConfig(probability=float(s["probability"]), factor=int(s["factor"]),
                         crop_max=int(s["crop_max"]),
                         rotation_max_deg=float(s["rotation_max_deg"]),
                         brightness_max=float(s["brightness_max"]),
                         contrast_range=tuple(s["contrast_range"]), seed=int(s["seed"]))


def train_config(cfg: RunConfig):
    from .trainer import TrainConfig

    s = cfg.section("train")
    return TrainConfig(
        initial_lr=float(s["initial_lr"]), weight_decay=float(s["weight_decay"]),
        max_epochs=int(s["max_epochs"]), plateau_patience=int(s["plateau_patience"]),
        plateau_factor=float(s["plateau_factor"]), min_lr=float(s["min_lr"]),
        early_stop_window=int(s["early_stop_window"]), virtual_batch=int(s["virtual_batch"]),
        micro_batch=int(s["micro_batch"]), seed=int(s["seed"]),
        reduced_precision=bool(s["reduced_precision"]), monitor=s["monitor"],
        dice_reduction=s["dice_reduction"])


def grid_spec(cfg: RunConfig):
    from .tuning import GridSpec

    return GridSpec(**{a: cfg.get("grid", a) for a in GridSpec.axes()})
