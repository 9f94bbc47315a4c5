"""Flat ``key = value`` run configuration.

One committed config file reproduces a whole experiment; CLI flags override
individual keys. Unknown keys are rejected, values are typed by the field
they set, and write -> parse -> write is byte-stable.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from evbei.pipeline import PipelineParams
from evbei.superevents import ClusterConfig

__all__ = ["PipelineConfig", "ConfigError", "parse_config", "write_config"]


class ConfigError(ValueError):
    """Bad key, bad value type, or out-of-domain parameter."""


@dataclass
class PipelineConfig:
    """Every stage parameter plus dataset paths and output location.

    limit == 0 means no event limit; max_age == 0 selects the adaptive
    staleness bound; fixed_interval == 0 selects scene-adaptive rendering.
    """

    # dataset / run
    events_path: str = ""
    images_manifest: str = ""
    out_dir: str = "out"
    sensor_width: int = 240
    sensor_height: int = 180
    seed: int = 0
    limit: int = 0
    # flow estimation
    radius: int = 2
    support_size: int = 5
    max_age: float = 0.0
    max_age_scale: float = 5.0
    interval_warmup: int = 100
    q_lo: float = 0.01
    q_hi: float = 0.99
    warmup: int = 500
    reservoir_capacity: int = 4096
    # lifetimes
    kappa_bei: float = 3.0
    kappa_c: float = 3.0
    reset: bool = True
    reset_mode: str = "truncate"
    # rendering
    s_bar: float = 1.0
    rate_window: float = 0.01
    dt_min: float = 0.001
    dt_max: float = 0.5
    impulse_filter: bool = True
    fixed_interval: float = 0.0
    orientation_png: bool = True
    # superevents
    cell_size: int = 16
    iterations: int = 10
    compactness: float = 1.0
    orientation_weight: float = 0.5
    merge_threshold: float = 0.05
    # evaluation
    canny_sigma: float = 1.4
    canny_low: float = 0.15
    canny_high: float = 0.45
    pr_tolerance: int = 1
    # stage toggles
    do_superevents: bool = True
    do_eval: bool = True

    def validate(self) -> None:
        self.to_pipeline_params()
        self.to_cluster_config()
        if not (0.0 <= self.canny_low <= self.canny_high <= 1.0):
            raise ConfigError(
                f"need 0 <= canny_low <= canny_high <= 1, got ({self.canny_low}, {self.canny_high})"
            )
        if self.canny_sigma <= 0:
            raise ConfigError(f"canny_sigma must be > 0, got {self.canny_sigma}")
        if self.pr_tolerance < 0:
            raise ConfigError(f"pr_tolerance must be >= 0, got {self.pr_tolerance}")
        if self.sensor_width < 1 or self.sensor_height < 1:
            raise ConfigError("sensor dimensions must be >= 1")
        if self.limit < 0:
            raise ConfigError(f"limit must be >= 0, got {self.limit}")

    def to_pipeline_params(self, use_kernel: bool | None = None) -> PipelineParams:
        try:
            return PipelineParams(
                radius=self.radius,
                support_size=self.support_size,
                max_age=self.max_age,
                max_age_scale=self.max_age_scale,
                interval_warmup=self.interval_warmup,
                q_lo=self.q_lo,
                q_hi=self.q_hi,
                warmup=self.warmup,
                reservoir_capacity=self.reservoir_capacity,
                kappa_bei=self.kappa_bei,
                kappa_c=self.kappa_c,
                reset=self.reset,
                reset_mode=self.reset_mode,
                s_bar=self.s_bar,
                rate_window=self.rate_window,
                dt_min=self.dt_min,
                dt_max=self.dt_max,
                apply_impulse_filter=self.impulse_filter,
                fixed_interval=self.fixed_interval,
                seed=self.seed,
                use_kernel=use_kernel,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def to_cluster_config(self) -> ClusterConfig:
        try:
            return ClusterConfig(
                cell_size=self.cell_size,
                iterations=self.iterations,
                compactness=self.compactness,
                orientation_weight=self.orientation_weight,
                merge_threshold=self.merge_threshold,
                seed=self.seed,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(raw: str, typ, key: str):
    raw = raw.strip()
    if typ is bool:
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {typ.__name__}, got {raw!r}") from None
    return raw


def parse_config(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    """Parse ``key = value`` lines over `base` (default config when None).

    Blank lines and '#' comments are ignored; unknown keys are rejected.
    """
    cfg = dataclasses.replace(base) if base is not None else PipelineConfig()
    types = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}
    # Field annotations are strings under `from __future__ import annotations`.
    resolved = {"str": str, "int": int, "float": float, "bool": bool}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        typ = types[key]
        if isinstance(typ, str):
            typ = resolved[typ]
        setattr(cfg, key, _parse_value(raw, typ, key))
    cfg.validate()
    return cfg


def load_config(path, base: PipelineConfig | None = None) -> PipelineConfig:
    return parse_config(Path(path).read_text(), base=base)


def write_config(cfg: PipelineConfig) -> str:
    """Canonical text form: one ``key = value`` line per field, field order."""
    lines = [
        f"{f.name} = {_format_value(getattr(cfg, f.name))}"
        for f in dataclasses.fields(PipelineConfig)
    ]
    return "\n".join(lines) + "\n"


def save_config(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(write_config(cfg))
