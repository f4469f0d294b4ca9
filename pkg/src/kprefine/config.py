"""Pipeline configuration: JSON file values overridden by command-line flags."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .align import AGGREGATION_RADIUS, FINE_ZOOM, GRID_SIZE, GRID_SPACING, MAX_LONG_EDGE, PATCH_SIZE
from .optimize import MODES, SolverOptions


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    keypoints: str | None = None
    matches: str | None = None
    flows: str | None = None
    images: str | None = None
    out: str | None = None
    # solver
    K: float = 16.0
    cauchy_scale: float = 4.0
    tukey_scale: float = 1.0
    mode: str = "full"
    max_iterations: int = 200
    constant_flow: bool = False
    # alignment
    grid_spacing: float = GRID_SPACING
    fine_zoom: float = FINE_ZOOM
    patch_size: int = PATCH_SIZE
    grid_size: int = GRID_SIZE
    aggregation_radius: int = AGGREGATION_RADIUS
    max_long_edge: int = MAX_LONG_EDGE
    # match filtering on input similarities
    filter_mode: str = "none"
    filter_threshold: float = 0.8
    # evaluation
    thresholds: tuple[float, ...] = tuple(float(t) for t in range(1, 11))
    threads: int = 1
    seed: int = 0

    def validate(self) -> "PipelineConfig":
        self.mode = self.mode.replace("-", "_")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}")
        for name in ("K", "cauchy_scale", "tukey_scale", "grid_spacing"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.fine_zoom < 1:
            raise ConfigError("fine_zoom must be at least 1")
        if self.max_iterations < 0:
            raise ConfigError("max_iterations must be non-negative")
        if self.patch_size % 2 == 0 or self.grid_size % 2 == 0 or self.grid_size > self.patch_size:
            raise ConfigError("patch_size and grid_size must be odd with grid_size <= patch_size")
        if self.aggregation_radius < 0:
            raise ConfigError("aggregation_radius must be non-negative")
        if self.max_long_edge < 1:
            raise ConfigError("max_long_edge must be positive")
        if self.filter_mode not in ("none", "similarity"):
            raise ConfigError("filter_mode must be 'none' or 'similarity'")
        if not 0 < self.filter_threshold < 1:
            raise ConfigError("filter_threshold must lie in (0, 1)")
        self.thresholds = tuple(float(t) for t in self.thresholds)
        if not self.thresholds or any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])) \
                or self.thresholds[0] <= 0:
            raise ConfigError("thresholds must be positive and strictly ascending")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        return self

    def solver_options(self) -> SolverOptions:
        return SolverOptions(K=self.K, cauchy_scale=self.cauchy_scale, tukey_scale=self.tukey_scale,
                             mode=self.mode, max_iterations=self.max_iterations,
                             constant_flow=self.constant_flow)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["thresholds"] = list(self.thresholds)
        return d


def parse_thresholds(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise ConfigError(f"cannot parse thresholds {text!r}") from None


def load_config(path: str | None = None, overrides: dict | None = None) -> PipelineConfig:
    """Defaults, then JSON file values, then non-None ``overrides``."""
    values: dict = {}
    known = {f.name for f in fields(PipelineConfig)}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"{p}: config file not found")
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: expected a JSON object")
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"{p}: unknown keys {', '.join(unknown)}")
        values.update(data)
    for k, v in (overrides or {}).items():
        if v is not None:
            if k not in known:
                raise ConfigError(f"unknown option {k}")
            values[k] = v
    if isinstance(values.get("thresholds"), str):
        values["thresholds"] = parse_thresholds(values["thresholds"])
    try:
        cfg = PipelineConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()
