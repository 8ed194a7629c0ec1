"""Mask-head configuration and its flat ``key = value`` text format."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .blocks import BLOCK_KINDS
from .errors import ConfigError


@dataclass(frozen=True)
class MaskHeadConfig:
    # frozen detector interface
    d: int = 128
    num_classes: int = 3
    enc_layer_index: int = 4
    n_queries: int = 100
    # trainable parts
    d_mapper: int = 128  # 0 disables the channel mapper (features keep d channels)
    img_enc: str = "deformable"
    img_depth: int = 2
    box_enc: str = "deformable"
    box_depth: int = 2
    roi_h: int = 32
    roi_w: int = 32
    query_o2o: bool = False
    query_b2o: bool = True
    query_ffn: bool = True
    neck: bool = True
    mask_scoring: bool = True
    compose_scores: bool = False  # multiply the mask-mean factor on top of predicted IoU
    full_image_path: bool = False
    # block hyperparameters
    heads: int = 8
    levels: int = 4
    points: int = 4
    ffn_ratio: int = 4
    window: int = 8
    neck_groups: int = 32
    score_channels: int = 64
    score_hidden: int = 256
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def width(self) -> int:
        """Channel count of the features the masks are read from."""
        return self.d_mapper if self.d_mapper else self.d

    @property
    def has_mapper(self) -> bool:
        return bool(self.d_mapper)

    def validate(self) -> None:
        for name in ("img_enc", "box_enc"):
            if getattr(self, name) not in BLOCK_KINDS:
                raise ConfigError(f"{name} must be one of {BLOCK_KINDS}, got {getattr(self, name)!r}")
        if self.img_depth < 0 or self.box_depth < 0:
            raise ConfigError("encoder depths must be >= 0")
        if self.roi_h < 4 or self.roi_w < 4:
            raise ConfigError("RoI sizes must be >= 4")
        if self.d_mapper < 0 or self.d_mapper > self.d:
            raise ConfigError("d_mapper must lie in [0, d]")
        if self.d % self.heads or self.width % self.heads:
            raise ConfigError(f"d={self.d} and mapped width {self.width} must be divisible by heads={self.heads}")
        if self.neck and self.d % self.neck_groups:
            raise ConfigError(f"d={self.d} not divisible into {self.neck_groups} groups")
        if not 1 <= self.levels <= 4:
            raise ConfigError("levels must lie in [1, 4]")
        if self.window < 1 or self.points < 1 or self.ffn_ratio < 1 or self.n_queries < 1:
            raise ConfigError("window, points, ffn_ratio and n_queries must be >= 1")
        if self.full_image_path and (self.box_depth and self.box_enc != "none"):
            raise ConfigError("the full-image path has no RoI grid for a box encoder")
        if self.full_image_path and self.mask_scoring:
            raise ConfigError("mask scoring needs the RoI path")

    def with_(self, **kw) -> "MaskHeadConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MaskHeadConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def baseline_config(**kw) -> MaskHeadConfig:
    """Everything trainable switched off (the no-training baseline)."""
    base = dict(d_mapper=0, img_enc="none", img_depth=0, box_enc="none", box_depth=0,
                query_o2o=False, query_b2o=False, query_ffn=False, neck=False, mask_scoring=False)
    base.update(kw)
    return MaskHeadConfig(**base)


_BOOL = {"true": True, "1": True, "yes": True, "on": True,
         "false": False, "0": False, "no": False, "off": False}


def _coerce(name: str, raw: str):
    types = {f.name: f.type for f in fields(MaskHeadConfig)}
    if name not in types:
        raise ConfigError(f"unknown config key {name!r}")
    kind = types[name]
    raw = raw.strip()
    try:
        if kind in ("bool", bool):
            return _BOOL[raw.lower()]
        if kind in ("int", int):
            return int(raw)
        return raw
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key] = _coerce(key, val)
    return out


def load_config(path=None, overrides: dict | None = None) -> MaskHeadConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return MaskHeadConfig(**values)


def dump_config(cfg: MaskHeadConfig) -> str:
    lines = ["# mask head configuration"]
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
