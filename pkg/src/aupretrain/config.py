"""Plain-text ``key = value`` run configuration.

Lines starting with ``#`` are comments. Training keys may carry a stage
prefix (``pretrain.lr = 0.005``, ``finetune.lr = 0.0001``); unprefixed
training keys apply to both stages. Unknown keys are rejected.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

from .datapipe import AugmentConfig
from .errors import ConfigError
from .synthgen import SynthSpec
from .trainer import TrainConfig

STAGES = ("pretrain", "finetune")


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text):
    t = str(text).strip().lower()
    return None if t in ("", "none", "null") else int(t)


def _str_list(text):
    return [s.strip() for s in str(text).split(",") if s.strip()]


def _int_list(text):
    return [int(s) for s in _str_list(text)]


TRAIN_KEYS = {
    "lr": float,
    "beta1": float,
    "beta2": float,
    "eps": float,
    "batch_size": int,
    "max_epochs": int,
    "early_stop_patience": _opt_int,
    "convergence_tol": float,
    "convergence_window": int,
    "val_fraction": float,
    "eval_batch_size": int,
    "augment": _bool,
    "flip_prob": float,
    "max_rotation_deg": float,
    "max_shear": float,
    "scale_lo": float,
    "scale_hi": float,
}

COMMON_KEYS = {
    "seed": int,
    "in_channels": int,
    "width_multiplier": float,
    "init": str,
    "dropout_scale": float,
    "label_kind": str,
    "au_columns": _str_list,
    "folds": int,
    "threshold": float,
}

SYNTH_KEYS = {
    "n_subjects": int,
    "images_per_subject": int,
    "n_labels": int,
    "label_noise_rate": float,
    "image_size": int,
    "first_subject": int,
    "label_prevalence": float,
}

ABLATE_KEYS = {
    "axis": str,
    "grid": _str_list,
    "seeds": _int_list,
    "images_per_point": _opt_int,
    "per_subject_cap": _opt_int,
    "gender_balanced": _bool,
    "pretrain_budget": _opt_int,
}

COMMON_DEFAULTS = {
    "seed": 0,
    "in_channels": 1,
    "width_multiplier": 1.0,
    "init": "he_uniform",
    "dropout_scale": 1.0,
    "label_kind": "binary",
    "au_columns": [],
    "folds": 3,
    "threshold": 0.5,
}

ABLATE_DEFAULTS = {
    "axis": "images",
    "grid": [],
    "seeds": [0],
    "images_per_point": None,
    "per_subject_cap": None,
    "gender_balanced": True,
    "pretrain_budget": None,
}

_AUG_DEFAULT = AugmentConfig()


def _train_defaults(stage):
    base = TrainConfig.for_pretraining() if stage == "pretrain" else TrainConfig.for_finetuning()
    d = {k: getattr(base, k) for k in TRAIN_KEYS if hasattr(base, k)}
    d.update(
        augment=True,
        flip_prob=_AUG_DEFAULT.flip_prob,
        max_rotation_deg=_AUG_DEFAULT.max_rotation_deg,
        max_shear=_AUG_DEFAULT.max_shear,
        scale_lo=_AUG_DEFAULT.scale_range[0],
        scale_hi=_AUG_DEFAULT.scale_range[1],
    )
    return d


def _synth_defaults():
    spec = SynthSpec()
    return {k: getattr(spec, k) for k in SYNTH_KEYS}


COMMAND_STAGES = {
    "synth": (),
    "pretrain": ("pretrain",),
    "finetune": ("finetune",),
    "eval": (),
    "report": (),
    "ablate": ("pretrain", "finetune"),
}


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


class RunConfig:
    """Effective configuration of one command: defaults, then file, then overrides."""

    def __init__(self, command, values=None):
        if command not in COMMAND_STAGES:
            raise ConfigError(f"unknown command {command!r}")
        self.command = command
        self.parsers = dict(COMMON_KEYS)
        self.values = dict(COMMON_DEFAULTS)
        if command == "synth":
            self.parsers.update(SYNTH_KEYS)
            self.values.update(_synth_defaults())
        if command == "ablate":
            self.parsers.update(ABLATE_KEYS)
            self.values.update(ABLATE_DEFAULTS)
        for stage in COMMAND_STAGES[command]:
            for k, parser in TRAIN_KEYS.items():
                self.parsers[f"{stage}.{k}"] = parser
            self.values.update({f"{stage}.{k}": v for k, v in _train_defaults(stage).items()})
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key, raw):
        key = key.strip()
        stages = COMMAND_STAGES[self.command]
        if key in TRAIN_KEYS and stages:
            for stage in stages:
                self.set(f"{stage}.{key}", raw)
            return
        if key not in self.parsers:
            raise ConfigError(f"unknown config key {key!r} for command {self.command!r}")
        if isinstance(raw, str):
            try:
                raw = self.parsers[key](raw.strip())
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}") from None
        self.values[key] = raw

    def update_from_text(self, text, source="<config>"):
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            try:
                self.set(key, value)
            except ConfigError as exc:
                raise ConfigError(f"{source}:{lineno}: {exc}") from None

    def update_from_file(self, path):
        self.update_from_text(Path(path).read_text(encoding="utf-8"), str(path))

    def __getitem__(self, key):
        return self.values[key]

    def dump(self):
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in sorted(self.values))

    def hash(self):
        text = f"command = {self.command}\n" + self.dump()
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    def train_config(self, stage):
        g = lambda k: self.values[f"{stage}.{k}"]  # noqa: E731
        augment = None
        if g("augment"):
            augment = AugmentConfig(g("flip_prob"), g("max_rotation_deg"), g("max_shear"), (g("scale_lo"), g("scale_hi")))
        return TrainConfig(
            lr=g("lr"), beta1=g("beta1"), beta2=g("beta2"), eps=g("eps"), batch_size=g("batch_size"),
            max_epochs=g("max_epochs"), early_stop_patience=g("early_stop_patience"),
            convergence_tol=g("convergence_tol"), convergence_window=g("convergence_window"),
            val_fraction=g("val_fraction"), seed=self.values["seed"], augment=augment,
            in_channels=self.values["in_channels"], eval_batch_size=g("eval_batch_size"),
        )

    def synth_spec(self):
        return SynthSpec(**{k: self.values[k] for k in SYNTH_KEYS}, seed=self.values["seed"])
