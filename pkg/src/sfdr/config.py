"""Flat key=value run configuration.

Precedence: built-in defaults, then a config file, then command-line
overrides.  The fully resolved mapping is serialized into every run
manifest.
"""

from __future__ import annotations

from pathlib import Path

from .data_io import CorpusHeader, SyntheticDims
from .model import ModelConfig
from .trainer import TrainConfig

DEFAULTS: dict[str, str] = {
    "ssff.alpha": "0.5",
    "ssff.model_dim": "64",
    "dgfr.heads": "2",
    "dgfr.edge_mode": "product",
    "dgfr.self_loops": "on",
    "decoder.layers": "2",
    "decoder.dim": "64",
    "decoder.heads": "2",
    "decoder.ffw": "128",
    "decoder.max_len": "20",
    "train.batch_size": "64",
    "train.epochs": "40",
    "train.lr": "5e-6",
    "train.seed": "0",
    "train.grad_clip": "5.0",
    "train.min_count": "5",
    "train.scst_epochs": "5",
    "infer.beam": "5",
    "infer.length_norm": "0.0",
    "eval.cider_variant": "plain",
    "eval.rouge_beta": "1.2",
    "data.d_v": "32",
    "data.d_t": "32",
    "data.H": "16",
    "data.d_g": "64",
    "data.k": "8",
    "data.d_r": "32",
    "data.classes": "4",
    "data.captions_per_image": "1",
    "threads": "1",
}

# small-corpus overrides that make the toy training runs converge
DESK_PRESET: dict[str, str] = {
    "train.batch_size": "4",
    "train.epochs": "200",
    "train.lr": "2e-3",
    "train.min_count": "0",
}

PRESETS = {"desk": DESK_PRESET}


class ConfigError(ValueError):
    """A configuration key or value is unusable."""


class RunConfig:
    def __init__(self, values: dict[str, str] | None = None):
        self.values = dict(DEFAULTS)
        if values:
            self.update(values)

    def update(self, overrides: dict[str, str]) -> None:
        for key, value in overrides.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            self.values[key] = value

    def apply_preset(self, name: str) -> None:
        if name not in PRESETS:
            raise ConfigError(
                f"unknown preset {name!r}; available: {sorted(PRESETS)}")
        self.values.update(PRESETS[name])

    def load_file(self, path) -> None:
        text = Path(path).read_text(encoding="utf-8")
        overrides = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = body.split("=", 1)
            overrides[key.strip()] = value.strip()
        self.update(overrides)

    # typed getters ---------------------------------------------------------
    def get_int(self, key: str) -> int:
        try:
            return int(self.values[key])
        except ValueError:
            raise ConfigError(f"{key} must be an integer, got "
                              f"{self.values[key]!r}") from None

    def get_float(self, key: str) -> float:
        try:
            return float(self.values[key])
        except ValueError:
            raise ConfigError(f"{key} must be a number, got "
                              f"{self.values[key]!r}") from None

    def get_bool(self, key: str) -> bool:
        raw = self.values[key].lower()
        if raw in ("on", "true", "1", "yes"):
            return True
        if raw in ("off", "false", "0", "no"):
            return False
        raise ConfigError(f"{key} must be on/off, got {raw!r}")

    def __getitem__(self, key: str) -> str:
        return self.values[key]

    # assembled sub-configs -------------------------------------------------
    def synthetic_dims(self) -> SyntheticDims:
        return SyntheticDims(
            d_v=self.get_int("data.d_v"), d_t=self.get_int("data.d_t"),
            H=self.get_int("data.H"), d_g=self.get_int("data.d_g"),
            k=self.get_int("data.k"), d_r=self.get_int("data.d_r"),
            classes=self.get_int("data.classes"))

    def model_config(self, header: CorpusHeader, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            header=header,
            vocab_size=vocab_size,
            d=self.get_int("ssff.model_dim"),
            alpha=self.get_float("ssff.alpha"),
            dgfr_heads=self.get_int("dgfr.heads"),
            edge_mode=self["dgfr.edge_mode"],
            self_loops=self.get_bool("dgfr.self_loops"),
            dec_layers=self.get_int("decoder.layers"),
            dec_dim=self.get_int("decoder.dim"),
            dec_heads=self.get_int("decoder.heads"),
            dec_ffw=self.get_int("decoder.ffw"),
            max_len=self.get_int("decoder.max_len"),
        )

    def train_config(self, stage: str) -> TrainConfig:
        return TrainConfig(
            batch_size=self.get_int("train.batch_size"),
            epochs=self.get_int("train.epochs") if stage == "ce"
            else self.get_int("train.scst_epochs"),
            lr=self.get_float("train.lr"),
            stage=stage,
            seed=self.get_int("train.seed"),
            grad_clip=self.get_float("train.grad_clip"),
            min_count=self.get_int("train.min_count"),
        )
