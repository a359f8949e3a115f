"""Flat key=value run configuration with dotted keys and override flags.

Config files are UTF-8 text, one `key = value` per line, `#` starts a
comment. Dotted keys express nesting (`model.video.dbof.cluster_size = 128`).
Command-line `--set key=value` pairs override file values, and the CIRC_SEED
environment variable overrides every key ending in `.seed`. Each run writes
its fully resolved configuration back out as a snapshot, which is itself a
valid config file.
"""

from __future__ import annotations

import os

from . import layers
from .data import DatasetSpec

ENV_SEED = "CIRC_SEED"


class ConfigError(ValueError):
    """Bad configuration or usage; maps to exit code 1 at the CLI."""


DEFAULTS = {
    # synthetic dataset (desk scale)
    "dataset.num_labels": "64",
    "dataset.video_dim": "16",
    "dataset.audio_dim": "4",
    "dataset.frames_min": "24",
    "dataset.frames_max": "60",
    "dataset.train_videos": "2000",
    "dataset.validation_videos": "500",
    "dataset.label_cardinality": "0.5,0.3,0.2",
    "dataset.noise_sigma": "0.2",
    "dataset.outlier_rate": "0.0",
    "dataset.seed": "1234",
    # model (desk scale)
    "model.labels": "64",
    "model.frames_sampled": "30",
    "model.video.enabled": "true",
    "model.video.feature_dim": "16",
    "model.video.embeddings": "dbof",
    "model.video.dbof.cluster_size": "128",
    "model.video.dbof.pooling": "max",
    "model.video.dbof.robust_samples": "10",
    "model.video.dbof.robust_sample_size": "15",
    "model.video.dbof.robust_exhaustive": "false",
    "model.video.dbof.kind": "dense",
    "model.video.dbof.factors": "1",
    "model.video.netvlad.clusters": "8",
    "model.video.netfv.clusters": "4",
    "model.video.fc.width": "32",
    "model.video.fc.kind": "dense",
    "model.video.fc.factors": "1",
    "model.audio.enabled": "true",
    "model.audio.feature_dim": "4",
    "model.audio.embeddings": "dbof",
    "model.audio.dbof.cluster_size": "64",
    "model.audio.dbof.pooling": "max",
    "model.audio.dbof.robust_samples": "10",
    "model.audio.dbof.robust_sample_size": "15",
    "model.audio.dbof.robust_exhaustive": "false",
    "model.audio.dbof.kind": "dense",
    "model.audio.dbof.factors": "1",
    "model.audio.netvlad.clusters": "4",
    "model.audio.netfv.clusters": "2",
    "model.audio.fc.width": "32",
    "model.audio.fc.kind": "dense",
    "model.audio.fc.factors": "1",
    "model.moe.mixtures": "2",
    "model.moe.kind": "dense",
    "model.moe.factors": "1",
    "model.cg.kind": "dense",
    "model.cg.factors": "1",
    "model.cg.norm": "batch_norm",
    # training
    "train.epochs": "5",
    "train.batch_size": "32",
    "train.lr": "0.01",
    "train.decay_rate": "0.8",
    "train.decay_every_examples": "4000",
    "train.clip_norm": "1.0",
    "train.seed": "7",
    "train.augment": "false",
    "train.checkpoint_each_epoch": "false",
    # benchmarks and experiments
    "bench.sizes": "256,512,1024,2048,4096,8192,16384",
    "bench.repetitions": "11",
    "bench.warmup": "3",
    "fitdc.n": "8",
    "fitdc.m_list": "1,2,4,8,16",
    "fitdc.target": "random",
    "fitdc.steps": "1500",
    "fitdc.lr": "0.05",
    "fitdc.seed": "0",
    "compare.recipe": "pooling",
    "compare.seeds": "101,202,303",
}

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        values[key] = value
    return values


class RunConfig:
    """Resolved configuration: defaults, then file values, then overrides."""

    def __init__(self, values=None):
        self.values = dict(DEFAULTS)
        if values:
            self.values.update(values)

    @classmethod
    def load(cls, path=None, overrides=(), env=None) -> "RunConfig":
        env = os.environ if env is None else env
        file_values = {}
        if path is not None:
            try:
                with open(path, encoding="utf-8") as fh:
                    file_values = parse_config_text(fh.read(), source=str(path))
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = cls(file_values)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"--set needs key=value, got {item!r}")
            key, value = item.split("=", 1)
            cfg.values[key.strip()] = value.strip()
        seed = env.get(ENV_SEED)
        if seed is not None:
            cfg.get_int_from_text(seed, ENV_SEED)  # validate
            for key in list(cfg.values):
                if key.endswith(".seed"):
                    cfg.values[key] = seed
            cfg.values["compare.seeds"] = seed
        return cfg

    @staticmethod
    def get_int_from_text(text, key):
        try:
            return int(text)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected integer, got {text!r}") from exc

    def get_str(self, key, choices=None) -> str:
        if key not in self.values:
            raise ConfigError(f"missing config key {key!r}")
        value = self.values[key]
        if choices is not None and value not in choices:
            raise ConfigError(f"{key}: expected one of {sorted(choices)}, got {value!r}")
        return value

    def get_int(self, key) -> int:
        return self.get_int_from_text(self.get_str(key), key)

    def get_float(self, key) -> float:
        text = self.get_str(key)
        try:
            return float(text)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected number, got {text!r}") from exc

    def get_bool(self, key) -> bool:
        text = self.get_str(key).lower()
        if text in _TRUE:
            return True
        if text in _FALSE:
            return False
        raise ConfigError(f"{key}: expected boolean, got {text!r}")

    def get_int_list(self, key) -> list:
        return [self.get_int_from_text(part.strip(), key)
                for part in self.get_str(key).split(",") if part.strip()]

    def get_float_list(self, key) -> list:
        out = []
        for part in self.get_str(key).split(","):
            part = part.strip()
            if part:
                try:
                    out.append(float(part))
                except ValueError as exc:
                    raise ConfigError(f"{key}: expected numbers, got {part!r}") from exc
        return out

    def get_str_list(self, key) -> list:
        return [part.strip() for part in self.get_str(key).split(",") if part.strip()]

    def with_updates(self, updates: dict) -> "RunConfig":
        merged = dict(self.values)
        merged.update({k: str(v) for k, v in updates.items()})
        cfg = RunConfig.__new__(RunConfig)
        cfg.values = merged
        return cfg

    def snapshot_text(self) -> str:
        lines = [f"{key} = {self.values[key]}" for key in sorted(self.values)]
        return "\n".join(lines) + "\n"

    def write_snapshot(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.snapshot_text())


# ---------------------------------------------------------------------------
# dataclass builders
# ---------------------------------------------------------------------------

def dataset_spec(cfg: RunConfig) -> DatasetSpec:
    spec = DatasetSpec(
        num_labels=cfg.get_int("dataset.num_labels"),
        video_dim=cfg.get_int("dataset.video_dim"),
        audio_dim=cfg.get_int("dataset.audio_dim"),
        frames_min=cfg.get_int("dataset.frames_min"),
        frames_max=cfg.get_int("dataset.frames_max"),
        train_videos=cfg.get_int("dataset.train_videos"),
        validation_videos=cfg.get_int("dataset.validation_videos"),
        label_cardinality=tuple(cfg.get_float_list("dataset.label_cardinality")),
        noise_sigma=cfg.get_float("dataset.noise_sigma"),
        outlier_rate=cfg.get_float("dataset.outlier_rate"),
        seed=cfg.get_int("dataset.seed"),
    )
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(f"invalid dataset spec: {exc}") from exc
    return spec


def _embedding_spec(cfg: RunConfig, modality: str, emb_type: str) -> layers.EmbeddingSpec:
    if emb_type == "dbof":
        prefix = f"model.{modality}.dbof"
        return layers.EmbeddingSpec(
            type="dbof",
            clusters=cfg.get_int(f"{prefix}.cluster_size"),
            pooling=cfg.get_str(f"{prefix}.pooling", choices=set(layers.POOLINGS)),
            robust_samples=cfg.get_int(f"{prefix}.robust_samples"),
            robust_sample_size=cfg.get_int(f"{prefix}.robust_sample_size"),
            robust_exhaustive=cfg.get_bool(f"{prefix}.robust_exhaustive"),
            kind=cfg.get_str(f"{prefix}.kind", choices={"dense", "dc", "cd"}),
            factors=cfg.get_int(f"{prefix}.factors"),
        )
    if emb_type in ("netvlad", "netfv"):
        return layers.EmbeddingSpec(
            type=emb_type,
            clusters=cfg.get_int(f"model.{modality}.{emb_type}.clusters"),
        )
    raise ConfigError(f"model.{modality}.embeddings: unknown embedding {emb_type!r}")


def model_config(cfg: RunConfig) -> layers.ModelConfig:
    modalities = []
    for name in ("video", "audio"):
        if not cfg.get_bool(f"model.{name}.enabled"):
            continue
        embeddings = [_embedding_spec(cfg, name, t)
                      for t in cfg.get_str_list(f"model.{name}.embeddings")]
        if not embeddings:
            raise ConfigError(f"model.{name}.embeddings is empty")
        modalities.append(layers.ModalitySpec(
            name=name,
            feature_dim=cfg.get_int(f"model.{name}.feature_dim"),
            embeddings=embeddings,
            fc_width=cfg.get_int(f"model.{name}.fc.width"),
            fc_kind=cfg.get_str(f"model.{name}.fc.kind", choices={"dense", "dc", "cd"}),
            fc_factors=cfg.get_int(f"model.{name}.fc.factors"),
        ))
    if not modalities:
        raise ConfigError("no modality enabled")
    return layers.ModelConfig(
        num_labels=cfg.get_int("model.labels"),
        frames_sampled=cfg.get_int("model.frames_sampled"),
        modalities=modalities,
        moe_mixtures=cfg.get_int("model.moe.mixtures"),
        moe_kind=cfg.get_str("model.moe.kind", choices={"dense", "dc", "cd"}),
        moe_factors=cfg.get_int("model.moe.factors"),
        cg_kind=cfg.get_str("model.cg.kind", choices={"dense", "dc", "cd"}),
        cg_factors=cfg.get_int("model.cg.factors"),
        cg_norm=cfg.get_str("model.cg.norm", choices={"batch_norm", "bias"}),
        sample_seed=cfg.get_int("train.seed"),
    )
