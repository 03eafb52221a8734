"""Run configuration: flat UTF-8 "key = value" text with dotted section
prefixes. Every key has a documented default; unknown keys are errors.
Environment variables FMNPP_<KEY> (dots become underscores, upper case)
override file values; explicit CLI overrides win over both.
"""

from __future__ import annotations

import os

from .adapters import ClassifierConfig, TrackDecoderConfig
from .backbone import ModelConfig
from .eventgen import DetectorConfig, GenParams


class ConfigError(ValueError):
    pass


# key -> (default, help)
DEFAULTS: dict[str, tuple] = {
    "gen.seed": (0, "corpus RNG seed"),
    "gen.multiplicity_mean": (12.0, "mean tracks per event"),
    "gen.multiplicity_shape": (1.0, "negative-binomial shape parameter"),
    "gen.pt_mean": (0.6, "exponential pT tail mean, GeV/c"),
    "gen.pt_min": (0.1, "pT truncation, GeV/c"),
    "gen.noise_fraction": (0.08, "target fraction of noise points"),
    "gen.pid_probs": ((0.70, 0.07, 0.07, 0.05, 0.11),
                      "class probabilities: pion,kaon,proton,electron,other"),
    "gen.vertex_sigma_xy": (0.01, "transverse vertex spread, cm"),
    "gen.vertex_sigma_z": (5.0, "longitudinal vertex spread, cm"),
    "det.b_field": (1.4, "solenoid field, tesla"),
    "det.sigma_rphi": (0.02, "hit smearing along the pad row, cm"),
    "det.sigma_z": (0.05, "hit smearing along z, cm"),
    "model.d_model": (64, "model width"),
    "model.n_layers": (8, "mixer blocks"),
    "model.state_dim": (16, "recurrence state size per head"),
    "model.n_heads": (0, "heads; 0 selects width/64 (at least 1)"),
    "model.k": (10, "predicted forward neighbors per point"),
    "model.pe_levels": (6, "positional-encoding frequency levels"),
    "model.mup_base_width": (64, "width at which all lr multipliers are 1"),
    "model.seed": (0, "weight init seed"),
    "optim.peak_lr": (2e-4, "peak learning rate at the base width"),
    "optim.batch_size": (32, "events per step"),
    "optim.total_steps": (2000, "optimization steps"),
    "optim.warmup_steps": (200, "linear warmup steps"),
    "optim.clip_norm": (0.1, "global gradient-norm threshold"),
    "optim.weight_decay": (0.01, "decoupled weight decay"),
    "optim.beta1": (0.9, "Adam first-moment decay"),
    "optim.beta2": (0.999, "Adam second-moment decay"),
    "optim.eps": (1e-8, "Adam epsilon"),
    "pretrain.val_fraction": (0.1, "held-out fraction of the corpus"),
    "pretrain.data_fraction": (1.0, "fraction of the training split used"),
    "pretrain.difficulty_bins": (8, "quantile difficulty bins"),
    "pretrain.log_every": (25, "CSV logging cadence, steps"),
    "pretrain.val_every": (200, "validation cadence, steps"),
    "pretrain.shuffle_seed": (1234, "batch sampling seed"),
    "pretrain.stop_after": (0, "pause after this step for resumable runs (0 = off)"),
    "track.n_queries": (128, "learnable track queries; must cover the busiest event"),
    "track.n_layers": (3, "decoder layers"),
    "track.d_embed": (128, "decoder embedding width"),
    "track.lambda_dice": (5.0, "dice loss weight"),
    "track.lambda_focal": (5.0, "focal loss weight"),
    "track.lambda_cls": (2.0, "objectness loss weight"),
    "track.focal_gamma": (2.0, "focal exponent"),
    "track.focal_alpha": (0.25, "focal positive-class weight"),
    "track.eps_mask": (1e-8, "attention-mask epsilon"),
    "track.seed": (0, "decoder init seed"),
    "track.lr": (1e-3, "adapter peak learning rate"),
    "track.steps": (600, "adapter optimization steps"),
    "track.batch_size": (8, "events per adapter step"),
    "track.warmup_steps": (60, "adapter warmup steps"),
    "classifier.d_embed": (128, "classifier embedding width"),
    "classifier.seed": (0, "classifier init seed"),
    "classifier.lr": (2e-3, "classifier peak learning rate"),
    "classifier.steps": (800, "classifier optimization steps"),
    "classifier.batch_size": (8, "events per classifier step"),
    "classifier.warmup_steps": (80, "classifier warmup steps"),
    "classifier.class_weights": ((), "optional per-class CE weights, empty = off"),
}

ENV_PREFIX = "FMNPP_"


def _parse_value(key: str, text: str):
    default = DEFAULTS[key][0]
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes"):
                return True
            if text.lower() in ("0", "false", "no"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            if not text:
                return ()
            return tuple(float(part) for part in text.split(","))
        return text
    except ValueError as exc:
        raise ConfigError(f"cannot parse value for {key!r}: {text!r}") from exc


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def env_name(key: str) -> str:
    return ENV_PREFIX + key.upper().replace(".", "_")


class RunConfig:
    """Fully resolved configuration; every documented key has a value."""

    def __init__(self, values: dict):
        self.values = values

    def __getitem__(self, key: str):
        return self.values[key]

    def snapshot_text(self) -> str:
        lines = ["# resolved configuration snapshot"]
        for key in sorted(self.values):
            lines.append(f"{key} = {_format_value(self.values[key])}  # {DEFAULTS[key][1]}")
        return "\n".join(lines) + "\n"

    def section(self, prefix: str) -> dict:
        plen = len(prefix) + 1
        return {k[plen:]: v for k, v in self.values.items()
                if k.startswith(prefix + ".")}

    def detector(self) -> DetectorConfig:
        s = self.section("det")
        return DetectorConfig(b_field=s["b_field"], sigma_rphi=s["sigma_rphi"],
                              sigma_z=s["sigma_z"])

    def gen_params(self) -> GenParams:
        s = self.section("gen")
        return GenParams(seed=s["seed"], multiplicity_mean=s["multiplicity_mean"],
                         multiplicity_shape=s["multiplicity_shape"],
                         pt_mean=s["pt_mean"], pt_min=s["pt_min"],
                         noise_fraction=s["noise_fraction"],
                         pid_probs=s["pid_probs"],
                         vertex_sigma_xy=s["vertex_sigma_xy"],
                         vertex_sigma_z=s["vertex_sigma_z"])

    def model_config(self) -> ModelConfig:
        s = self.section("model")
        return ModelConfig(**s)

    def track_config(self) -> TrackDecoderConfig:
        s = self.section("track")
        keys = ("n_queries", "n_layers", "d_embed", "lambda_dice", "lambda_focal",
                "lambda_cls", "focal_gamma", "focal_alpha", "eps_mask", "seed")
        return TrackDecoderConfig(**{k: s[k] for k in keys})

    def classifier_config(self, n_classes: int) -> ClassifierConfig:
        s = self.section("classifier")
        weights = tuple(s["class_weights"]) or None
        if weights is not None and len(weights) != n_classes:
            raise ConfigError("classifier.class_weights length must equal n_classes")
        return ClassifierConfig(n_classes=n_classes, d_embed=s["d_embed"],
                                seed=s["seed"], class_weights=weights)


def load_config(path=None, overrides=None, use_env=True) -> RunConfig:
    values = {key: default for key, (default, _) in DEFAULTS.items()}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, text = (part.strip() for part in line.split("=", 1))
                if key not in DEFAULTS:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
                values[key] = _parse_value(key, text)
    if use_env:
        for key in DEFAULTS:
            text = os.environ.get(env_name(key))
            if text is not None:
                values[key] = _parse_value(key, text)
    for key, value in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, value) if isinstance(value, str) else value
    return RunConfig(values)
