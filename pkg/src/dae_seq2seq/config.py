"""Run configuration: flat ``key = value`` text with one section per module."""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace

from .model import PRESETS as MODEL_PRESETS, ConfigError, ModelConfig
from .noising import NoiseConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    mode: str = "sentence"
    vocab_max_size: int = 1000
    segment_len: int = 128
    sentence_max: int = 500
    valid_fraction: float = 0.01

    def __post_init__(self):
        if self.mode not in ("sentence", "paragraph"):
            raise ConfigError(f"data.mode must be 'sentence' or 'paragraph', got {self.mode!r}")


@dataclass
class DecodeConfig:
    beam: int = 4
    max_len: int = 64
    length_alpha: float = 1.0
    min_len: int = 1


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: dict = field(default_factory=lambda: dict(MODEL_PRESETS["desk"]))
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, **self.model)

    def noise_config(self) -> NoiseConfig:
        return replace(self.noise, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed)

    # ---------------------------------------------------------------- text
    def to_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp["run"] = {"seed": str(self.seed)}
        for name, obj in self._sections().items():
            cp[name] = {k: _fmt(v) for k, v in obj.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def _sections(self) -> dict:
        def plain(dc, skip=()):
            return {f.name: getattr(dc, f.name) for f in fields(dc) if f.init and f.name not in skip}

        return {
            "data": plain(self.data),
            "model": dict(self.model),
            "noise": plain(self.noise, ("seed",)),
            "train": plain(self.train, ("seed",)),
            "decode": plain(self.decode),
        }

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        """Parse config text over ``base`` (default: the desk preset).

        A ``[run] preset = paper|desk`` entry switches the base preset.
        Unknown sections or keys are rejected.
        """
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"unparseable config: {e}") from None
        if base is None:
            preset_name = cp.get("run", "preset", fallback="desk")
            base = preset(preset_name)
        sections = base._sections()
        seed = base.seed
        for sec in cp.sections():
            if sec == "run":
                for k, v in cp[sec].items():
                    if k == "seed":
                        seed = _parse(v, seed, "run.seed")
                    elif k != "preset":
                        raise ConfigError(f"unknown key run.{k}")
                continue
            if sec not in sections:
                raise ConfigError(f"unknown section [{sec}]")
            cur = sections[sec]
            for k, v in cp[sec].items():
                if k not in cur:
                    raise ConfigError(f"unknown key {sec}.{k}")
                cur[k] = _parse(v, cur[k], f"{sec}.{k}")
        try:
            cfg = cls(
                seed=seed,
                data=DataConfig(**sections["data"]),
                model=sections["model"],
                noise=NoiseConfig(**sections["noise"]),
                train=TrainConfig(**sections["train"]),
                decode=DecodeConfig(**sections["decode"]),
            )
            ModelConfig(vocab_size=1, **cfg.model)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as f:
            return cls.from_text(f.read())


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _parse(text: str, default, key: str):
    t = type(default)
    try:
        if t is bool:
            low = text.strip().lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if t is int:
            return int(text)
        if t is float:
            return float(text)
        return text.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {t.__name__}") from None


def preset(name: str) -> RunConfig:
    if name == "desk":
        return RunConfig(
            model=dict(MODEL_PRESETS["desk"]),
            train=TrainConfig(lr=0.03, momentum=0.9, ema_decay=0.99, token_budget=1000,
                              max_iterations=20000, patience=2),
            data=DataConfig(vocab_max_size=1000),
            decode=DecodeConfig(beam=4, max_len=64),
        )
    if name == "paper":
        model = {k: v for k, v in MODEL_PRESETS["paper"].items() if k != "vocab_size"}
        return RunConfig(
            model=model,
            train=TrainConfig(lr=2e-3, momentum=0.99, ema_decay=0.9995, token_budget=3000,
                              max_iterations=5_000_000, patience=1),
            data=DataConfig(mode="paragraph", vocab_max_size=50000),
            decode=DecodeConfig(beam=4, max_len=200),
        )
    raise ConfigError(f"unknown preset {name!r} (choose 'desk' or 'paper')")
