"""Architecture configuration: stage grammar, widths, heads, and precision.

A `ModelConfig` pins every hyperparameter the model builder needs and
serializes to a flat `key = value` text file (lists comma-separated) so an
experiment is reproducible from one artifact. `validate` enforces the
divisibility rules the block wiring depends on and names the violated rule
in its error.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .errors import ConfigError
from .tensor import FLOAT_DTYPES


@dataclass
class StageSpec:
    """One stage: `ncb_count` convolution blocks then one transformer block,
    repeated `repeats` times; `downsample` halves the grid entering the stage."""
    ncb_count: int
    repeats: int = 1
    downsample: bool = False


@dataclass
class ModelConfig:
    in_channels: int = 3
    image_size: int = 32
    patch_size: int = 4
    widths: list[int] = field(default_factory=lambda: [32, 64, 128, 192])
    stages: list[StageSpec] = field(default_factory=lambda: [
        StageSpec(1, 1, False),
        StageSpec(1, 1, True),
        StageSpec(2, 1, True),
        StageSpec(1, 1, True),
    ])
    heads: list[int] = field(default_factory=lambda: [2, 4, 8, 12])
    shrink_ratio: float = 0.75
    pool_strides: list[int] = field(default_factory=lambda: [4, 2, 1, 1])
    mlp_ratio: int = 2
    num_classes: int = 43
    ca_kernel: int = 3
    precision: str = "float32"
    norm_mean: list[float] = field(default_factory=lambda: [0.5, 0.5, 0.5])
    norm_std: list[float] = field(default_factory=lambda: [0.5, 0.5, 0.5])

    # -- derived quantities ---------------------------------------------------

    @property
    def dtype(self):
        return FLOAT_DTYPES[self.precision]

    def stem_grid(self) -> int:
        return self.image_size // self.patch_size

    def grid_sides(self) -> list[int]:
        """Spatial side of the token grid entering each stage.

        Downsampling transitions use a non-overlapping 2x2 stride-2
        convolution, so the incoming side must be even; `validate` checks.
        """
        sides = []
        side = self.stem_grid()
        for spec in self.stages:
            if spec.downsample:
                side //= 2
            sides.append(side)
        return sides

    def attn_channels(self, stage: int) -> int:
        return int(self.shrink_ratio * self.widths[stage])

    def local_channels(self, stage: int) -> int:
        return self.widths[stage] - self.attn_channels(stage)

    # -- validation -------------------------------------------------------------

    def validate(self) -> "ModelConfig":
        def fail(rule: str):
            raise ConfigError(f"invalid model config: {rule}")

        if self.precision not in FLOAT_DTYPES:
            fail(f"precision must be one of {sorted(FLOAT_DTYPES)}, got {self.precision!r}")
        if self.in_channels < 1:
            fail("in_channels must be >= 1")
        if self.patch_size < 1 or self.image_size < 1:
            fail("image_size and patch_size must be >= 1")
        if self.image_size % self.patch_size:
            fail(f"patch_size {self.patch_size} does not divide image_size {self.image_size}")
        n_stages = len(self.stages)
        if n_stages == 0:
            fail("at least one stage is required")
        if not (len(self.widths) == len(self.heads) == len(self.pool_strides) == n_stages):
            fail("widths, heads, pool_strides, and stages must have equal length")
        if self.mlp_ratio < 1:
            fail(f"mlp_ratio must be >= 1, got {self.mlp_ratio}")
        if not 0.0 < self.shrink_ratio < 1.0:
            fail(f"shrink_ratio must be in (0, 1), got {self.shrink_ratio}")
        if self.num_classes < 2:
            fail(f"num_classes must be >= 2, got {self.num_classes}")
        if self.ca_kernel < 1 or self.ca_kernel % 2 == 0:
            fail(f"ca_kernel must be odd and >= 1, got {self.ca_kernel}")
        if len(self.norm_mean) != self.in_channels or len(self.norm_std) != self.in_channels:
            fail("norm_mean/norm_std must have one entry per input channel")
        if any(s <= 0 for s in self.norm_std):
            fail("norm_std entries must be positive")
        sides = self.grid_sides()
        side = self.stem_grid()
        for i, spec in enumerate(self.stages):
            if spec.downsample and side % 2:
                fail(f"stage {i}: downsampling needs an even grid side, got {side}")
            side = sides[i]
        for i, spec in enumerate(self.stages):
            d, h, s = self.widths[i], self.heads[i], self.pool_strides[i]
            if spec.ncb_count < 0:
                fail(f"stage {i}: ncb_count must be >= 0")
            if spec.repeats < 1:
                fail(f"stage {i}: repeats must be >= 1")
            if d < 1 or h < 1:
                fail(f"stage {i}: width and heads must be >= 1")
            if d % h:
                fail(f"stage {i}: width {d} not divisible by heads {h}")
            ce = self.attn_channels(i)
            if ce < h:
                fail(f"stage {i}: attention path gets {ce} channels, fewer than {h} heads")
            if ce % h:
                fail(f"stage {i}: attention path channels {ce} not divisible by heads {h}")
            if (d - ce) % h:
                fail(f"stage {i}: local path channels {d - ce} not divisible by heads {h}")
            if d - ce < 1:
                fail(f"stage {i}: local path needs at least one channel")
            if sides[i] < 1:
                fail(f"stage {i}: token grid vanished (side {sides[i]})")
            if s < 1 or sides[i] % s:
                fail(f"stage {i}: pool stride {s} does not divide grid side {sides[i]}")
        return self


# ---------------------------------------------------------------------------
# Flat-text serialization
# ---------------------------------------------------------------------------

_INT_LIST_KEYS = {"widths", "heads", "pool_strides", "stage_ncbs",
                  "stage_repeats", "stage_downsample"}
_FLOAT_LIST_KEYS = {"norm_mean", "norm_std"}


def config_to_text(cfg: ModelConfig) -> str:
    """Render as one `key = value` per line; lists are comma-separated."""
    lines = []

    def put(key, value):
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")

    put("in_channels", cfg.in_channels)
    put("image_size", cfg.image_size)
    put("patch_size", cfg.patch_size)
    put("widths", cfg.widths)
    put("stage_ncbs", [s.ncb_count for s in cfg.stages])
    put("stage_repeats", [s.repeats for s in cfg.stages])
    put("stage_downsample", [int(s.downsample) for s in cfg.stages])
    put("heads", cfg.heads)
    put("shrink_ratio", cfg.shrink_ratio)
    put("pool_strides", cfg.pool_strides)
    put("mlp_ratio", cfg.mlp_ratio)
    put("num_classes", cfg.num_classes)
    put("ca_kernel", cfg.ca_kernel)
    put("precision", cfg.precision)
    put("norm_mean", cfg.norm_mean)
    put("norm_std", cfg.norm_std)
    return "\n".join(lines) + "\n"


def parse_config_items(text: str) -> dict[str, str]:
    """Split flat `key = value` lines into a dict; `#` starts a comment."""
    items: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno} is not 'key = value': {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in items:
            raise ConfigError(f"config line {lineno}: duplicate key {key!r}")
        items[key] = value.strip()
    return items


def config_from_items(items: dict[str, str]) -> ModelConfig:
    """Build a validated `ModelConfig` from flat key/value strings.

    Unknown keys are rejected so typos cannot silently fall back to defaults.
    """
    cfg = ModelConfig()
    scalar_fields = {f.name: f.type for f in fields(ModelConfig)}
    stage_parts: dict[str, list[int]] = {}
    try:
        for key, value in items.items():
            if key in ("stage_ncbs", "stage_repeats", "stage_downsample"):
                stage_parts[key] = [int(v) for v in value.split(",")]
            elif key in _INT_LIST_KEYS:
                setattr(cfg, key, [int(v) for v in value.split(",")])
            elif key in _FLOAT_LIST_KEYS:
                setattr(cfg, key, [float(v) for v in value.split(",")])
            elif key in ("in_channels", "image_size", "patch_size", "mlp_ratio",
                         "num_classes", "ca_kernel"):
                setattr(cfg, key, int(value))
            elif key == "shrink_ratio":
                cfg.shrink_ratio = float(value)
            elif key == "precision":
                cfg.precision = value
            elif key in scalar_fields:
                raise ConfigError(f"config key {key!r} cannot be set from text")
            else:
                raise ConfigError(f"unknown config key {key!r}")
    except ValueError as exc:
        raise ConfigError(f"malformed config value: {exc}") from exc
    if stage_parts:
        expected = {"stage_ncbs", "stage_repeats", "stage_downsample"}
        if set(stage_parts) != expected:
            raise ConfigError(
                f"stage keys must appear together: need {sorted(expected)}"
            )
        ncbs = stage_parts["stage_ncbs"]
        reps = stage_parts["stage_repeats"]
        downs = stage_parts["stage_downsample"]
        if not (len(ncbs) == len(reps) == len(downs)):
            raise ConfigError("stage_ncbs, stage_repeats, stage_downsample lengths differ")
        cfg.stages = [StageSpec(n, r, bool(d)) for n, r, d in zip(ncbs, reps, downs)]
    return cfg.validate()


def config_from_text(text: str) -> ModelConfig:
    return config_from_items(parse_config_items(text))


def load_config(path) -> ModelConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_text(fh.read())


def save_config(cfg: ModelConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config_to_text(cfg))


# ---------------------------------------------------------------------------
# Stock configurations
# ---------------------------------------------------------------------------

def desk_config(**overrides) -> ModelConfig:
    """CPU-trainable configuration: 32x32 input, widths 32-192, 43 classes."""
    cfg = ModelConfig()
    for key, value in overrides.items():
        if not hasattr(cfg, key):
            raise ConfigError(f"unknown config field {key!r}")
        setattr(cfg, key, value)
    return cfg.validate()


def micro_config(**overrides) -> ModelConfig:
    """Single-stage miniature used by gradient checks and smoke tests."""
    cfg = ModelConfig(
        image_size=8,
        patch_size=4,
        widths=[8],
        stages=[StageSpec(1, 1, False)],
        heads=[2],
        shrink_ratio=0.75,
        pool_strides=[1],
        mlp_ratio=2,
        num_classes=4,
        precision="float64",
    )
    for key, value in overrides.items():
        if not hasattr(cfg, key):
            raise ConfigError(f"unknown config field {key!r}")
        setattr(cfg, key, value)
    return cfg.validate()
