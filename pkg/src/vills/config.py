"""Configuration: flat dotted keys, `key = value` files, strict validation.

Config files are UTF-8 text, one `key = value` per line, `#` starts a
comment.  Unknown keys and precondition violations are rejected before any
computation happens.
"""

import numpy as np

from .errors import ConfigError

# key -> (type, default)
SCHEMA = {
    "encoder.dim": (int, 64),
    "encoder.depth": (int, 2),
    "encoder.heads": (int, 4),
    "encoder.image_patch": (int, 8),
    "encoder.frame_patch": (int, 4),
    "encoder.image_height": (int, 32),
    "encoder.image_width": (int, 16),
    "encoder.frame_height": (int, 16),
    "encoder.frame_width": (int, 8),
    "encoder.frames": (int, 4),
    "encoder.mlp_ratio": (int, 4),
    "ufla.queries": (int, 4),
    "ufla.prototypes": (int, 128),
    "ufla.head_hidden": (int, 64),
    "ufla.head_bottleneck": (int, 32),
    "ufla.student_temp": (float, 0.1),
    "ufla.teacher_temp": (float, 0.04),
    "ufla.center_momentum": (float, 0.99),
    "ufla.mask_ratio": (float, 0.3),
    "ufla.ema_momentum": (float, 0.9),
    "ufla.align_temp": (float, 0.2),
    "ufla.lambda_feature": (float, 1.0),
    "ufla.lambda_masking": (float, 1.0),
    "ufla.lambda_koleo": (float, 3.0),
    "ufla.lambda_alignment": (float, 2.0),
    "lse.areas": (int, 3),
    "lse.tau_head": (float, 0.5),
    "lse.tau_torso": (float, 0.5),
    "lse.tau_legs": (float, 0.5),
    "lse.crop_height": (int, 16),
    "lse.crop_width": (int, 8),
    "lse.keypoint_noise": (float, 0.0),
    "lse.score_noise": (float, 0.0),
    "train.learning_rate": (float, 1e-3),
    "train.clip_norm": (float, 3.0),
    "train.batch_videos": (int, 4),
    "train.batch_images": (int, 4),
    "train.seed": (int, 0),
    "train.dtype": (str, "f32"),
    "finetune.learning_rate": (float, 0.05),
    "finetune.triplet_margin": (float, 0.3),
    "finetune.batch_identities": (int, 4),
    "finetune.batch_samples": (int, 4),
}

_DTYPE_NAMES = {"f32": np.float32, "f64": np.float64}


class Config:
    """Validated bag of every tunable, addressed by dotted key."""

    def __init__(self, values=None):
        self._values = {k: default for k, (_, default) in SCHEMA.items()}
        if values:
            for key, value in values.items():
                self._set(key, value)
        self.validate()

    def _set(self, key, value):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        typ, _ = SCHEMA[key]
        try:
            if typ is int:
                # reject silent float truncation ("4.5" is not an int)
                if isinstance(value, str):
                    value = int(value, 0)
                elif isinstance(value, float) and value != int(value):
                    raise ValueError(value)
                else:
                    value = int(value)
            elif typ is float:
                value = float(value)
            else:
                value = str(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config key {key!r}: cannot parse {value!r} as {typ.__name__}") from exc
        self._values[key] = value

    def __getitem__(self, key):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def replace(self, **dotted):
        """New Config with keys overridden; dots written as `__` in kwargs."""
        values = dict(self._values)
        for key, value in dotted.items():
            values[key.replace("__", ".")] = value
        return Config(values)

    def items(self):
        return self._values.items()

    # -- derived views -----------------------------------------------------

    @property
    def image_extent(self):
        return (self["encoder.image_height"], self["encoder.image_width"])

    @property
    def frame_extent(self):
        return (self["encoder.frame_height"], self["encoder.frame_width"])

    @property
    def crop_extent(self):
        return (self["lse.crop_height"], self["lse.crop_width"])

    @property
    def dtype(self):
        return _DTYPE_NAMES[self["train.dtype"]]

    @property
    def loss_weights(self):
        return (
            self["ufla.lambda_feature"],
            self["ufla.lambda_masking"],
            self["ufla.lambda_koleo"],
            self["ufla.lambda_alignment"],
        )

    @property
    def area_taus(self):
        return (self["lse.tau_head"], self["lse.tau_torso"], self["lse.tau_legs"])

    def validate(self):
        v = self._values

        def need(cond, msg):
            if not cond:
                raise ConfigError(f"config rejected: {msg}")

        need(v["encoder.dim"] >= 1 and v["encoder.heads"] >= 1, "encoder.dim and encoder.heads must be >= 1")
        need(v["encoder.dim"] % v["encoder.heads"] == 0, "encoder.dim must be divisible by encoder.heads")
        need(v["encoder.depth"] >= 0, "encoder.depth must be >= 0")
        need(v["encoder.mlp_ratio"] >= 1, "encoder.mlp_ratio must be >= 1")
        for fam, patch_key in (("image", "encoder.image_patch"), ("frame", "encoder.frame_patch")):
            patch = v[patch_key]
            need(patch >= 1, f"{patch_key} must be >= 1")
            h, w = v[f"encoder.{fam}_height"], v[f"encoder.{fam}_width"]
            need(h >= 1 and w >= 1, f"{fam} extent must be positive")
            need(
                h % patch == 0 and w % patch == 0,
                f"{fam} extent {h}x{w} not divisible by patch {patch}",
            )
        need(v["encoder.frames"] >= 1, "encoder.frames must be >= 1")
        need(v["ufla.queries"] >= 1, "ufla.queries must be >= 1")
        need(v["ufla.prototypes"] >= 2, "ufla.prototypes must be >= 2")
        need(v["ufla.head_hidden"] >= 1 and v["ufla.head_bottleneck"] >= 1, "head widths must be >= 1")
        need(v["ufla.student_temp"] > 0 and v["ufla.teacher_temp"] > 0, "temperatures must be positive")
        need(
            v["ufla.teacher_temp"] < v["ufla.student_temp"],
            "ufla.teacher_temp must be below ufla.student_temp (sharpening)",
        )
        need(0.0 <= v["ufla.center_momentum"] <= 1.0, "ufla.center_momentum must lie in [0, 1]")
        need(0.0 <= v["ufla.mask_ratio"] <= 1.0, "ufla.mask_ratio must lie in [0, 1]")
        need(0.0 <= v["ufla.ema_momentum"] <= 1.0, "ufla.ema_momentum must lie in [0, 1]")
        need(v["ufla.align_temp"] > 0, "ufla.align_temp must be positive")
        for lam in ("feature", "masking", "koleo", "alignment"):
            need(v[f"ufla.lambda_{lam}"] >= 0, f"ufla.lambda_{lam} must be non-negative")
        need(0 <= v["lse.areas"] <= 3, "lse.areas must lie in 0..3")
        for part in ("head", "torso", "legs"):
            need(0.0 <= v[f"lse.tau_{part}"] <= 1.0, f"lse.tau_{part} must lie in [0, 1]")
        need(v["lse.keypoint_noise"] >= 0 and v["lse.score_noise"] >= 0, "lse noise levels must be >= 0")
        need(
            (v["lse.crop_height"], v["lse.crop_width"]) == (v["encoder.frame_height"], v["encoder.frame_width"]),
            "lse crop extent must equal the encoder frame extent so crops are encodable",
        )
        need(v["train.learning_rate"] >= 0, "train.learning_rate must be >= 0")
        need(v["train.clip_norm"] > 0, "train.clip_norm must be positive")
        need(v["train.batch_videos"] >= 2, "train.batch_videos must be >= 2 (alignment needs negatives)")
        need(v["train.batch_images"] >= 1, "train.batch_images must be >= 1")
        need(v["train.dtype"] in _DTYPE_NAMES, "train.dtype must be f32 or f64")
        need(v["finetune.learning_rate"] >= 0, "finetune.learning_rate must be >= 0")
        need(v["finetune.triplet_margin"] >= 0, "finetune.triplet_margin must be >= 0")
        need(v["finetune.batch_identities"] >= 2, "finetune.batch_identities must be >= 2")
        need(v["finetune.batch_samples"] >= 2, "finetune.batch_samples must be >= 2")


def parse_config_text(text):
    """Parse `key = value` lines into a raw dict; comments start with #."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected `key = value`, got {line!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def load_config(path=None, overrides=None):
    values = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            values.update(parse_config_text(fh.read()))
    if overrides:
        values.update(overrides)
    return Config(values)


def config_to_entries(cfg):
    """Encode every key as container entries under the `config.` prefix."""
    entries = {}
    for key, value in cfg.items():
        typ, _ = SCHEMA[key]
        if typ is str:
            codes = {"f32": 0, "f64": 1}
            entries[f"config.{key}"] = np.array([codes[value]], dtype=np.uint8)
        else:
            entries[f"config.{key}"] = np.array([value], dtype=np.float64)
    return entries


def config_from_entries(entries):
    values = {}
    for name, arr in entries.items():
        if not name.startswith("config."):
            continue
        key = name[len("config.") :]
        if key not in SCHEMA:
            raise ConfigError(f"checkpoint carries unknown config key {key!r}")
        typ, _ = SCHEMA[key]
        if typ is str:
            values[key] = {0: "f32", 1: "f64"}[int(arr[0])]
        elif typ is int:
            values[key] = int(arr[0])
        else:
            values[key] = float(arr[0])
    return Config(values)
