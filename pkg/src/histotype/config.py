"""Pipeline configuration: one flat key = value file drives every stage.

Lines are `key = value`; blank lines and lines starting with # are
ignored. Values are typed by the schema below, paths resolve relative to
the config file's directory, and any key can be overridden from the CLI
with --override key=value. Unknown keys are rejected so typos cannot
silently fall back to defaults.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from . import CLASS_ORDER
from .errors import ConfigError

# quota/threshold keys use lowercase class tags
CLASS_TAGS = {"LumA": "luma", "LumB": "lumb", "HER2": "her2",
              "Basal": "basal"}

DEFAULT_CONFIG_TEXT = """\
# cohort inputs
paths.manifest = manifest.csv
paths.work_dir = work            # all stage outputs live under this directory

# tiling
tiling.tile_size = 512           # square tile edge, pixels at working resolution
tiling.target_mpp = 0.5          # working resolution, microns per pixel
tiling.overlap_default = 0       # stride = tile_size - overlap
tiling.overlap_her2 = 64         # denser sampling for the scarcest subtype
tiling.min_tissue_fraction = 0.5 # keep tiles at least half covered by tissue
tiling.mask_downsample = 16      # tissue mask resolution divisor

# stain normalization
stain.i0 = 255                   # white point for optical density
stain.alpha = 1.0                # angular percentile picking stain extremes
stain.beta = 0.15                # OD floor; pixels below it in any channel drop
stain.reference_wsis = 256       # mosaic cells, one tumor tile per slide

# tile scoring
scorer.command =                 # external scorer argv; empty = synthetic scorer
scorer.signal = 1.0              # synthetic scorer fidelity in [0, 1]
scorer.truth_dir =               # category rasters for synthetic ground truth
scoring.tumor_threshold = 0.5    # tumor gate on the target score (inclusive)
scoring.strict_pairs = true      # reject score pairs that do not sum to 1

# per-slide tumor tile quotas for the training set ("all" = no quota)
quota.luma = 441
quota.lumb = 1180
quota.basal = 1410
quota.her2 = all

# patient-level split fractions (must sum to 1)
split.cnn_train = 0.70
split.cnn_val = 0.0
split.xgb = 0.15
split.test = 0.15
split.cnn_internal_val = 0.20    # tile share held out for threshold fitting
split.xgb_internal_train = 0.80  # WSI share used to fit the meta-classifier

# decision thresholds: recompute from validation scores, or use the fixed values
thresholds.mode = recompute      # recompute | fixed
thresholds.luma = 0.434
thresholds.lumb = 0.415
thresholds.her2 = 0.481
thresholds.basal = 0.424

# feature aggregation
features.max_tiles =             # optional per-WSI tile cap; empty = all tiles
features.fractions = false       # emit fractions instead of raw counts

# meta-classifier
gbdt.n_rounds = 40
gbdt.learning_rate = 0.1
gbdt.reg_lambda = 1.0
gbdt.gamma = 0.0
gbdt.max_depth = 3
gbdt.min_child_weight = 1.0

# evaluation
bootstrap.n_resamples = 1000
bootstrap.level = 0.95

# heatmap rendering
heatmap.downsample = 16
heatmap.opacity = 0.4

seed = 0
"""


@dataclass(frozen=True)
class PipelineConfig:
    manifest: Path
    work_dir: Path
    tile_size: int = 512
    target_mpp: float = 0.5
    overlap_default: int = 0
    overlap_her2: int = 64
    min_tissue_fraction: float = 0.5
    mask_downsample: int = 16
    stain_i0: float = 255.0
    stain_alpha: float = 1.0
    stain_beta: float = 0.15
    reference_wsis: int = 256
    scorer_command: str = ""
    scorer_signal: float = 1.0
    scorer_truth_dir: Path | None = None
    tumor_threshold: float = 0.5
    strict_pairs: bool = True
    quotas: Mapping[str, int | None] = field(default_factory=lambda: {
        "LumA": 441, "LumB": 1180, "Basal": 1410, "HER2": None})
    split_fractions: tuple[float, float, float, float] = (0.70, 0.0, 0.15,
                                                          0.15)
    cnn_internal_val: float = 0.20
    xgb_internal_train: float = 0.80
    thresholds_mode: str = "recompute"
    fixed_thresholds: Mapping[str, float] = field(default_factory=lambda: {
        "LumA": 0.434, "LumB": 0.415, "HER2": 0.481, "Basal": 0.424})
    features_max_tiles: int | None = None
    features_fractions: bool = False
    gbdt_n_rounds: int = 40
    gbdt_learning_rate: float = 0.1
    gbdt_reg_lambda: float = 1.0
    gbdt_gamma: float = 0.0
    gbdt_max_depth: int = 3
    gbdt_min_child_weight: float = 1.0
    bootstrap_n_resamples: int = 1000
    bootstrap_level: float = 0.95
    heatmap_downsample: int = 16
    heatmap_opacity: float = 0.4
    seed: int = 0

    def validate(self) -> None:
        checks = [
            (self.tile_size >= 1, "tiling.tile_size must be >= 1"),
            (self.target_mpp > 0, "tiling.target_mpp must be positive"),
            (0 <= self.overlap_default < self.tile_size,
             "tiling.overlap_default must be in [0, tile_size)"),
            (0 <= self.overlap_her2 < self.tile_size,
             "tiling.overlap_her2 must be in [0, tile_size)"),
            (0.0 <= self.min_tissue_fraction <= 1.0,
             "tiling.min_tissue_fraction must be in [0, 1]"),
            (self.mask_downsample >= 1,
             "tiling.mask_downsample must be >= 1"),
            (self.stain_i0 > 1, "stain.i0 must exceed 1"),
            (0.0 < self.stain_alpha < 50.0,
             "stain.alpha must be in (0, 50)"),
            (self.stain_beta >= 0, "stain.beta must be >= 0"),
            (self.reference_wsis >= 1, "stain.reference_wsis must be >= 1"),
            (0.0 <= self.scorer_signal <= 1.0,
             "scorer.signal must be in [0, 1]"),
            (0.0 <= self.tumor_threshold <= 1.0,
             "scoring.tumor_threshold must be in [0, 1]"),
            (all(f >= 0 for f in self.split_fractions),
             "split fractions must be >= 0"),
            (abs(sum(self.split_fractions) - 1.0) <= 1e-9,
             "split fractions must sum to 1"),
            (0.0 < self.cnn_internal_val < 1.0,
             "split.cnn_internal_val must be in (0, 1)"),
            (0.0 < self.xgb_internal_train < 1.0,
             "split.xgb_internal_train must be in (0, 1)"),
            (self.thresholds_mode in ("recompute", "fixed"),
             "thresholds.mode must be recompute or fixed"),
            (all(0.0 <= t <= 1.0 for t in self.fixed_thresholds.values()),
             "fixed thresholds must be in [0, 1]"),
            (self.features_max_tiles is None or self.features_max_tiles >= 1,
             "features.max_tiles must be >= 1 when set"),
            (self.gbdt_n_rounds >= 0, "gbdt.n_rounds must be >= 0"),
            (0.0 < self.gbdt_learning_rate <= 1.0,
             "gbdt.learning_rate must be in (0, 1]"),
            (self.gbdt_reg_lambda >= 0 and self.gbdt_gamma >= 0,
             "gbdt.reg_lambda and gbdt.gamma must be >= 0"),
            (self.gbdt_max_depth >= 0, "gbdt.max_depth must be >= 0"),
            (self.gbdt_min_child_weight >= 0,
             "gbdt.min_child_weight must be >= 0"),
            (self.bootstrap_n_resamples >= 1,
             "bootstrap.n_resamples must be >= 1"),
            (0.0 < self.bootstrap_level < 1.0,
             "bootstrap.level must be in (0, 1)"),
            (self.heatmap_downsample >= 1,
             "heatmap.downsample must be >= 1"),
            (0.0 <= self.heatmap_opacity <= 1.0,
             "heatmap.opacity must be in [0, 1]"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        for cls in CLASS_ORDER:
            if cls not in self.quotas:
                raise ConfigError(f"missing quota for class {cls}")
            if cls not in self.fixed_thresholds:
                raise ConfigError(f"missing threshold for class {cls}")
            q = self.quotas[cls]
            if q is not None and q < 1:
                raise ConfigError(f"quota for {cls} must be >= 1 or all")

    def overlap_for(self, label: str) -> int:
        return self.overlap_her2 if label == "HER2" else self.overlap_default


def _parse_lines(text: str, origin: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{origin}:{number}: expected key = value")
        key = key.strip()
        value = value.split("#", 1)[0].strip()
        if not key:
            raise ConfigError(f"{origin}:{number}: empty key")
        if key in values:
            raise ConfigError(f"{origin}:{number}: duplicate key {key!r}")
        values[key] = value
    return values


def _to_int(key: str, value: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {value!r}") \
            from None


def _to_float(key: str, value: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {value!r}") \
            from None


def _to_bool(key: str, value: str) -> bool:
    lowered = value.lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ConfigError(f"{key}: expected true or false, got {value!r}")


def _to_quota(key: str, value: str) -> int | None:
    if value.lower() == "all":
        return None
    return _to_int(key, value)


def parse_config(text: str, base_dir: Path,
                 overrides: Sequence[str] = (),
                 origin: str = "<config>") -> PipelineConfig:
    values = _parse_lines(text, origin)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r}: expected key=value")
        values[key.strip()] = value.strip()

    known = set(_parse_lines(DEFAULT_CONFIG_TEXT, "<defaults>"))
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    merged = _parse_lines(DEFAULT_CONFIG_TEXT, "<defaults>")
    merged.update(values)

    def path_of(key, required=True):
        value = merged[key]
        if not value:
            if required:
                raise ConfigError(f"{key} must be set")
            return None
        return (base_dir / value).resolve()

    quotas = {cls: _to_quota(f"quota.{tag}", merged[f"quota.{tag}"])
              for cls, tag in CLASS_TAGS.items()}
    thresholds = {cls: _to_float(f"thresholds.{tag}",
                                 merged[f"thresholds.{tag}"])
                  for cls, tag in CLASS_TAGS.items()}
    max_tiles = merged["features.max_tiles"]
    config = PipelineConfig(
        manifest=path_of("paths.manifest"),
        work_dir=path_of("paths.work_dir"),
        tile_size=_to_int("tiling.tile_size", merged["tiling.tile_size"]),
        target_mpp=_to_float("tiling.target_mpp",
                             merged["tiling.target_mpp"]),
        overlap_default=_to_int("tiling.overlap_default",
                                merged["tiling.overlap_default"]),
        overlap_her2=_to_int("tiling.overlap_her2",
                             merged["tiling.overlap_her2"]),
        min_tissue_fraction=_to_float("tiling.min_tissue_fraction",
                                      merged["tiling.min_tissue_fraction"]),
        mask_downsample=_to_int("tiling.mask_downsample",
                                merged["tiling.mask_downsample"]),
        stain_i0=_to_float("stain.i0", merged["stain.i0"]),
        stain_alpha=_to_float("stain.alpha", merged["stain.alpha"]),
        stain_beta=_to_float("stain.beta", merged["stain.beta"]),
        reference_wsis=_to_int("stain.reference_wsis",
                               merged["stain.reference_wsis"]),
        scorer_command=merged["scorer.command"],
        scorer_signal=_to_float("scorer.signal", merged["scorer.signal"]),
        scorer_truth_dir=path_of("scorer.truth_dir", required=False),
        tumor_threshold=_to_float("scoring.tumor_threshold",
                                  merged["scoring.tumor_threshold"]),
        strict_pairs=_to_bool("scoring.strict_pairs",
                              merged["scoring.strict_pairs"]),
        quotas=quotas,
        split_fractions=(
            _to_float("split.cnn_train", merged["split.cnn_train"]),
            _to_float("split.cnn_val", merged["split.cnn_val"]),
            _to_float("split.xgb", merged["split.xgb"]),
            _to_float("split.test", merged["split.test"]),
        ),
        cnn_internal_val=_to_float("split.cnn_internal_val",
                                   merged["split.cnn_internal_val"]),
        xgb_internal_train=_to_float("split.xgb_internal_train",
                                     merged["split.xgb_internal_train"]),
        thresholds_mode=merged["thresholds.mode"],
        fixed_thresholds=thresholds,
        features_max_tiles=(None if not max_tiles
                            else _to_int("features.max_tiles", max_tiles)),
        features_fractions=_to_bool("features.fractions",
                                    merged["features.fractions"]),
        gbdt_n_rounds=_to_int("gbdt.n_rounds", merged["gbdt.n_rounds"]),
        gbdt_learning_rate=_to_float("gbdt.learning_rate",
                                     merged["gbdt.learning_rate"]),
        gbdt_reg_lambda=_to_float("gbdt.reg_lambda",
                                  merged["gbdt.reg_lambda"]),
        gbdt_gamma=_to_float("gbdt.gamma", merged["gbdt.gamma"]),
        gbdt_max_depth=_to_int("gbdt.max_depth", merged["gbdt.max_depth"]),
        gbdt_min_child_weight=_to_float("gbdt.min_child_weight",
                                        merged["gbdt.min_child_weight"]),
        bootstrap_n_resamples=_to_int("bootstrap.n_resamples",
                                      merged["bootstrap.n_resamples"]),
        bootstrap_level=_to_float("bootstrap.level",
                                  merged["bootstrap.level"]),
        heatmap_downsample=_to_int("heatmap.downsample",
                                   merged["heatmap.downsample"]),
        heatmap_opacity=_to_float("heatmap.opacity",
                                  merged["heatmap.opacity"]),
        seed=_to_int("seed", merged["seed"]),
    )
    config.validate()
    return config


def load_config(path: str | Path,
                overrides: Sequence[str] = ()) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, path.parent.resolve(), overrides,
                        origin=str(path))


def write_default_config(path: str | Path) -> None:
    Path(path).write_text(DEFAULT_CONFIG_TEXT, encoding="utf-8")


def render_config(overrides: Mapping[str, str]) -> str:
    """Default config text with selected values replaced, comments kept."""
    remaining = dict(overrides)
    lines = []
    for raw in DEFAULT_CONFIG_TEXT.splitlines():
        stripped = raw.strip()
        if stripped and not stripped.startswith("#"):
            key = raw.partition("=")[0].strip()
            if key in remaining:
                rest = raw.partition("=")[2]
                comment = ""
                if "#" in rest:
                    comment = " " * 4 + "# " + rest.split("#", 1)[1].strip()
                lines.append(f"{key} = {remaining.pop(key)}{comment}")
                continue
        lines.append(raw)
    if remaining:
        raise ConfigError(f"unknown config keys: {sorted(remaining)}")
    return "\n".join(lines) + "\n"


# stage name -> config key prefixes that affect its output
STAGE_KEY_PREFIXES: dict[str, tuple[str, ...]] = {
    "tile": ("paths.", "tiling."),
    "split": ("paths.", "split.cnn_train", "split.cnn_val", "split.xgb",
              "split.test", "seed"),
    "build-ref": ("paths.", "stain.", "scorer.", "scoring.", "seed"),
    "normalize": ("paths.", "stain.", "scorer.", "scoring.", "quota.",
                  "seed"),
    "score": ("paths.", "scorer.", "scoring."),
    "threshold": ("paths.", "thresholds.", "split.cnn_internal_val", "seed"),
    "features": ("paths.", "features.", "thresholds."),
    "train": ("paths.", "gbdt.", "split.xgb_internal_train", "seed"),
    "predict": ("paths.",),
    "evaluate": ("paths.", "bootstrap.", "seed"),
    "heatmap": ("paths.", "heatmap.", "scorer.", "scoring."),
}


def stage_config_hash(stage: str, text: str, overrides: Sequence[str] = ()
                      ) -> str:
    """Hash of the config lines that can change a stage's output."""
    if stage not in STAGE_KEY_PREFIXES:
        raise ConfigError(f"unknown stage {stage!r}")
    values = _parse_lines(DEFAULT_CONFIG_TEXT, "<defaults>")
    values.update(_parse_lines(text, "<config>"))
    for item in overrides:
        key, sep, value = item.partition("=")
        if sep:
            values[key.strip()] = value.strip()
    prefixes = STAGE_KEY_PREFIXES[stage]
    relevant = sorted(
        (k, v) for k, v in values.items()
        if any(k == p or k.startswith(p) for p in prefixes))
    payload = "\n".join(f"{k}={v}" for k, v in relevant)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()
