"""Flat key=value run configuration shared by every CLI command.

Text format: one ``key = value`` per line, ``#`` starts a comment. Every
key has a typed default below; unknown keys are rejected so typos fail
loudly. The canonical dump (sorted keys, full-precision floats) feeds the
config hash that checkpoints embed and eval verifies.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .model import ModelConfig
from .pillars import PillarConfig
from .synthdata import ScenarioConfig
from .training import LossWeights


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parse_floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"not a float list: {text!r}") from exc


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format(value, ".17g")
    if isinstance(value, tuple):
        return ",".join(format(float(v), ".17g") for v in value)
    return str(value)


# key -> (parser, default, help)
KEY_SPECS = {
    "backbone": (str, "desk-small", "backbone preset name"),
    "pillar.channels": (int, 16, "pillar feature net output width"),
    "pillar.search_area": (_parse_floats, (-3.2, -3.2, -3.0, 3.2, 3.2, 1.0),
                           "search crop extents (x0,y0,z0,x1,y1,z1) m"),
    "pillar.search_cell": (_parse_floats, (0.1, 0.1, 4.0),
                           "search pillar size (dx,dy,dz) m"),
    "pillar.template_area": (_parse_floats, (-1.6, -1.6, -1.0, 1.6, 1.6, 1.0),
                             "template crop extents m"),
    "pillar.template_cell": (_parse_floats, (0.1, 0.1, 2.0),
                             "template pillar size m"),
    "pillar.max_points": (int, 32, "max points per pillar"),
    "pillar.max_pillars": (int, 4096, "max pillars per frame"),
    "encoder.width": (int, 64, "similarity encoder channel width"),
    "encoder.heads": (int, 8, "cross-attention heads"),
    "encoder.depth": (int, 1, "cross-attention blocks per scale"),
    "encoder.ffn": (int, 0, "encoder FFN hidden width (0 = width)"),
    "encoder.similarity": (str, "attention",
                           "attention | cosine | euclidean | xcorr"),
    "encoder.fusion": (str, "late", "late | early | c2 | c5"),
    "encoder.pos_enc": (_parse_bool, True, "add fixed grid position codes"),
    "decoder.k": (int, 64, "prediction set size"),
    "decoder.heads": (int, 8, "decoder attention heads"),
    "decoder.depth": (int, 1, "decoder attention blocks"),
    "decoder.ffn": (int, 0, "decoder FFN hidden width (0 = width)"),
    "decoder.two_stage": (_parse_bool, True, "proposal-seeded queries"),
    "train.steps": (int, 600, "optimizer steps"),
    "train.batch_size": (int, 8, "samples per step"),
    "train.lr": (float, 1e-4, "initial learning rate"),
    "train.weight_decay": (float, 0.05, "decoupled weight decay"),
    "train.lambda_cls": (float, 2.0, "classification loss weight"),
    "train.lambda_l1": (float, 5.0, "box L1 loss weight"),
    "train.milestones": (_parse_floats, (0.875, 0.958),
                         "lr decay points as fractions of train.steps"),
    "train.gamma": (float, 0.1, "lr decay factor at each milestone"),
    "train.stage_one_dense": (_parse_bool, False,
                              "dense per-cell stage-one targets instead of matching"),
    "train.jitter_xy": (float, 0.1, "search-center jitter std (m)"),
    "train.jitter_yaw": (float, 0.05, "search-center yaw jitter std (rad)"),
    "tracker.strategy": (str, "FP", "template source: F | P | FP | AP"),
    "tracker.margin": (float, 0.25, "template crop margin per side (m)"),
    "synth.sequences": (int, 20, "synthetic training sequences"),
    "synth.frames": (int, 10, "frames per synthetic sequence"),
    "synth.points": (int, 256, "target surface points per frame"),
    "synth.clutter": (int, 64, "clutter points per frame"),
    "synth.size": (_parse_floats, (1.9, 4.6, 1.7), "target box size (w,l,h) m"),
    "synth.speed": (float, 0.15, "target speed (m/frame)"),
    "synth.yaw_rate": (float, 0.02, "target turn rate (rad/frame)"),
    "synth.noise_xy": (float, 0.02, "motion noise std (m)"),
    "synth.noise_z": (float, 0.005, "vertical noise std (m)"),
    "synth.noise_yaw": (float, 0.01, "yaw noise std (rad)"),
}


@dataclass
class RunConfig:
    values: dict

    @staticmethod
    def defaults() -> "RunConfig":
        return RunConfig({k: spec[1] for k, spec in KEY_SPECS.items()})

    @staticmethod
    def parse(text: str) -> "RunConfig":
        cfg = RunConfig.defaults()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, _, value = line.partition("=")
            cfg.set(key.strip(), value.strip())
        return cfg

    @staticmethod
    def load(path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return RunConfig.parse(fh.read())

    def set(self, key: str, value: str) -> None:
        if key not in KEY_SPECS:
            raise ConfigError(f"unknown config key {key!r}")
        parser = KEY_SPECS[key][0]
        try:
            self.values[key] = parser(value)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {value!r}") from exc

    def with_overrides(self, overrides) -> "RunConfig":
        """Apply 'key=value' strings (CLI --set / ablation variants)."""
        out = RunConfig(dict(self.values))
        for item in overrides:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"override must look like key=value: {item!r}")
            out.set(key.strip(), value.strip())
        return out

    def __getitem__(self, key: str):
        return self.values[key]

    def dump(self) -> str:
        return "\n".join(f"{k} = {_fmt(self.values[k])}"
                         for k in sorted(self.values)) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.dump().encode()).hexdigest()

    # --- typed views -----------------------------------------------------

    def model_config(self) -> ModelConfig:
        try:
            search = PillarConfig(area=self["pillar.search_area"],
                                  pillar_size=self["pillar.search_cell"],
                                  max_points_per_pillar=self["pillar.max_points"],
                                  max_pillars=self["pillar.max_pillars"])
            template = PillarConfig(area=self["pillar.template_area"],
                                    pillar_size=self["pillar.template_cell"],
                                    max_points_per_pillar=self["pillar.max_points"],
                                    max_pillars=self["pillar.max_pillars"])
            encoder = EncoderConfig(width=self["encoder.width"],
                                    heads=self["encoder.heads"],
                                    depth=self["encoder.depth"],
                                    ffn_hidden=self["encoder.ffn"] or None,
                                    similarity=self["encoder.similarity"],
                                    fusion=self["encoder.fusion"],
                                    use_pos_enc=self["encoder.pos_enc"])
            decoder = DecoderConfig(k=self["decoder.k"],
                                    heads=self["decoder.heads"],
                                    depth=self["decoder.depth"],
                                    ffn_hidden=self["decoder.ffn"] or None,
                                    two_stage=self["decoder.two_stage"])
            return ModelConfig(backbone=self["backbone"],
                               pillar_channels=self["pillar.channels"],
                               search_pillars=search, template_pillars=template,
                               encoder=encoder, decoder=decoder)
        except (ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc

    def scenario_config(self, seed: int = 0) -> ScenarioConfig:
        try:
            return ScenarioConfig(n_frames=self["synth.frames"],
                                  size=self["synth.size"],
                                  speed=self["synth.speed"],
                                  yaw_rate=self["synth.yaw_rate"],
                                  noise_xy=self["synth.noise_xy"],
                                  noise_z=self["synth.noise_z"],
                                  noise_yaw=self["synth.noise_yaw"],
                                  points_on_target=self["synth.points"],
                                  clutter_points=self["synth.clutter"],
                                  seed=seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def loss_weights(self) -> LossWeights:
        try:
            return LossWeights(ce=self["train.lambda_cls"],
                               l1=self["train.lambda_l1"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def milestone_steps(self) -> tuple[int, ...]:
        steps = self["train.steps"]
        return tuple(int(frac * steps) for frac in self["train.milestones"])


def describe_keys() -> str:
    """Human-readable key reference with defaults (for --help-config)."""
    lines = []
    for key in sorted(KEY_SPECS):
        _, default, doc = KEY_SPECS[key]
        lines.append(f"{key:24s} = {_fmt(default):32s} # {doc}")
    return "\n".join(lines)
