"""
Run Configuration

Loads experiment configurations from YAML files (see config/default.yaml),
fills defaults, validates every section and reports problems with the dotted
field name and the line they come from. Also serialises a configuration back
to YAML so runs can record exactly what they executed.
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

import yaml

from src.errors import ConfigError, ParameterError
from src.lowrank_adamw import OptimizerConfig
from src.projection import HeadLayout
from src.sparse_residual import ResidualConfig
from src.toy_attention import ModelParams, TaskSpec

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = Path(__file__).parent.parent / "config" / "default.yaml"
DEFAULT_OUTPUT_DIR = "runs/latest"
HEAD_SELECTIONS = ("redraw", "fixed")
LOWRANK_ROLES = ("wq", "wk", "wv", "wo")

# Short names accepted by command-line overrides and sweeps
FIELD_ALIASES = {
    "rank": "optimizer.rank",
    "interval": "optimizer.interval",
    "lr": "optimizer.lr",
    "ratio": "residual.ratio",
    "warmup_k": "residual.warmup_k",
    "out": "output_dir",
}


class Method(str, Enum):
    DENSE_ADAMW = "dense-adamw"
    GALORE_EXACT = "galore-exact"
    GALORE_RSVD = "galore-rsvd"
    GALORE_PLUS = "galore-plus"
    GALORE_PLUS_NORES = "galore-plus-nores"

    @property
    def lowrank(self) -> bool:
        return self is not Method.DENSE_ADAMW

    @property
    def cross_head(self) -> bool:
        return self in (Method.GALORE_PLUS, Method.GALORE_PLUS_NORES)

    @property
    def residual(self) -> bool:
        return self is Method.GALORE_PLUS


@dataclass(frozen=True)
class ProjectionSettings:
    """Randomized decomposition and head selection settings.

    Attributes:
        oversample: Extra sketch columns p
        power_iters: Power iterations q
        head_selection: "redraw" a head at every refresh or keep the "fixed" first draw
        cross_head_targets: Roles projected with the cross-head method under galore-plus
    """

    oversample: int = 8
    power_iters: int = 2
    head_selection: str = "redraw"
    cross_head_targets: Tuple[str, ...] = ("wq", "wk")

    def __post_init__(self):
        if self.oversample < 0:
            raise ParameterError(f"must be >= 0, got {self.oversample}", field="oversample")
        if self.power_iters < 0:
            raise ParameterError(f"must be >= 0, got {self.power_iters}", field="power_iters")
        if self.head_selection not in HEAD_SELECTIONS:
            raise ParameterError(f"must be one of {HEAD_SELECTIONS}, got {self.head_selection!r}", field="head_selection")
        _check_roles(self.cross_head_targets, ("wq", "wk"), "cross_head_targets")


@dataclass(frozen=True)
class ResidualSettings:
    """Sparse residual settings plus the roles that carry a residual."""

    config: ResidualConfig
    targets: Tuple[str, ...] = ("wq", "wk")

    def __post_init__(self):
        _check_roles(self.targets, LOWRANK_ROLES, "targets")


@dataclass(frozen=True)
class RunConfig:
    """Everything a training run depends on.

    Attributes:
        method: Optimizer variant
        optimizer: AdamW, rank and refresh settings
        projection: Randomized decomposition settings
        residual: Sparse residual settings
        model: Attention layer layout
        task: Teacher regression task
        steps: Number of optimizer steps
        seed: Seed of the student initialisation, batches and projections
        output_dir: Directory the run writes to
    """

    method: Method
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    projection: ProjectionSettings = field(default_factory=ProjectionSettings)
    residual: ResidualSettings = field(default_factory=lambda: ResidualSettings(ResidualConfig()))
    model: HeadLayout = field(default_factory=lambda: HeadLayout(heads=8, d_model=128, d_k=16, d_v=16))
    task: TaskSpec = field(default_factory=TaskSpec)
    steps: int = 1000
    seed: int = 0
    output_dir: str = DEFAULT_OUTPUT_DIR

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"must be >= 1, got {self.steps}", field="steps")
        if self.seed < 0:
            raise ConfigError(f"must be >= 0, got {self.seed}", field="seed")

    def with_output_dir(self, output_dir: str) -> "RunConfig":
        return dataclasses.replace(self, output_dir=str(output_dir))


def _check_roles(roles: Tuple[str, ...], allowed: Tuple[str, ...], name: str) -> None:
    for role in roles:
        if role not in allowed:
            raise ParameterError(f"role {role!r} is not one of {allowed}", field=name)


# Section name -> {yaml key: expected type}
_SCHEMA: Dict[str, Dict[str, type]] = {
    "optimizer": {
        "lr": float, "beta1": float, "beta2": float, "eps": float, "weight_decay": float,
        "alpha": float, "rank": int, "interval": int, "lr_schedule": str,
    },
    "projection": {"oversample": int, "power_iters": int, "head_selection": str, "cross_head_targets": tuple},
    "residual": {"ratio": float, "warmup_k": int, "alpha_res": float, "clip": float, "targets": tuple},
    "model": {"heads": int, "d_model": int, "d_k": int, "d_v": int},
    "task": {
        "kind": str, "teacher_seed": int, "noise_std": float, "batch_size": int,
        "seq_len": int, "out_dim": int, "head_perturbation": float,
    },
}
_TOP_LEVEL: Dict[str, type] = {"method": str, "steps": int, "seed": int, "output_dir": str}


def _key_lines(node: Optional[yaml.Node], prefix: str = "") -> Dict[str, int]:
    """Map dotted keys of a composed YAML mapping to 1-based line numbers."""
    lines: Dict[str, int] = {}
    if not isinstance(node, yaml.MappingNode):
        return lines
    for key_node, value_node in node.value:
        dotted = f"{prefix}{key_node.value}"
        lines[dotted] = key_node.start_mark.line + 1
        lines.update(_key_lines(value_node, dotted + "."))
    return lines


def load_raw(path: Path) -> Tuple[Dict[str, Any], Dict[str, int]]:
    """Read a config file into a plain dict and its key line numbers.

    Args:
        path: YAML file

    Returns:
        Tuple of (raw mapping, dotted key -> line)
    """
    text = Path(path).read_text(encoding="utf-8")
    try:
        lines = _key_lines(yaml.compose(text, Loader=yaml.SafeLoader))
        raw = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        line = mark.line + 1 if mark is not None else None
        raise ConfigError(f"cannot parse YAML: {exc.problem}", line=line) from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping", line=1)
    return raw, lines


def _coerce(value: Any, kind: type, name: str, line: Optional[int]) -> Any:
    if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if kind is float and isinstance(value, str):
        # YAML 1.1 reads exponents without a dot (1e-8) as strings
        try:
            return float(value)
        except ValueError:
            pass
    if kind is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if kind is str and isinstance(value, str):
        return value
    if kind is tuple and isinstance(value, (list, tuple)) and all(isinstance(v, str) for v in value):
        return tuple(value)
    expected = {float: "a number", int: "an integer", str: "a string", tuple: "a list of names"}[kind]
    raise ConfigError(f"expected {expected}, got {value!r}", field=name, line=line)


def _section(raw: Mapping[str, Any], name: str, lines: Mapping[str, int]) -> Dict[str, Any]:
    values = raw.get(name) or {}
    if not isinstance(values, dict):
        raise ConfigError("must be a mapping", field=name, line=lines.get(name))
    schema = _SCHEMA[name]
    parsed = {}
    for key, value in values.items():
        dotted = f"{name}.{key}"
        if key not in schema:
            raise ConfigError(f"unknown key (expected one of {sorted(schema)})", field=dotted, line=lines.get(dotted))
        parsed[key] = _coerce(value, schema[key], dotted, lines.get(dotted))
    return parsed


def _build(section: str, factory, values: Dict[str, Any], lines: Mapping[str, int]):
    try:
        return factory(**values)
    except ParameterError as exc:
        dotted = f"{section}.{exc.field}" if exc.field else section
        raise ConfigError(str(exc), field=dotted, line=lines.get(dotted, lines.get(section))) from exc


def build_config(
    raw: Mapping[str, Any],
    lines: Optional[Mapping[str, int]] = None,
    default_output_dir: str = DEFAULT_OUTPUT_DIR,
) -> RunConfig:
    """Validate a raw mapping and turn it into a RunConfig.

    Args:
        raw: Mapping shaped like config/default.yaml
        lines: Dotted key -> line, for error messages
        default_output_dir: Output directory used when the mapping has none

    Returns:
        The validated RunConfig
    """
    lines = lines or {}
    for key in raw:
        if key not in _TOP_LEVEL and key not in _SCHEMA:
            raise ConfigError(
                f"unknown key (expected one of {sorted(list(_TOP_LEVEL) + list(_SCHEMA))})",
                field=str(key),
                line=lines.get(str(key)),
            )
    top = {key: _coerce(raw[key], kind, key, lines.get(key)) for key, kind in _TOP_LEVEL.items() if key in raw}

    if "method" not in top:
        raise ConfigError("is required (one of " + ", ".join(m.value for m in Method) + ")", field="method")
    try:
        method = Method(top["method"])
    except ValueError as exc:
        raise ConfigError(f"unknown method {top['method']!r}", field="method", line=lines.get("method")) from exc

    optimizer = _build("optimizer", OptimizerConfig, _section(raw, "optimizer", lines), lines)
    projection = _build("projection", ProjectionSettings, _section(raw, "projection", lines), lines)

    residual_values = _section(raw, "residual", lines)
    targets = residual_values.pop("targets", ("wq", "wk"))
    residual_values.setdefault("warmup_k", optimizer.interval)
    residual_config = _build("residual", ResidualConfig, residual_values, lines)
    residual = _build("residual", ResidualSettings, {"config": residual_config, "targets": targets}, lines)

    model_values = {"heads": 8, "d_model": 128, "d_k": 16, "d_v": 16}
    model_values.update(_section(raw, "model", lines))
    model = _build("model", HeadLayout, model_values, lines)
    task = _build("task", TaskSpec, _section(raw, "task", lines), lines)
    if method.residual:
        _check_residual_ratio(residual, model, task, lines)

    return RunConfig(
        method=method,
        optimizer=optimizer,
        projection=projection,
        residual=residual,
        model=model,
        task=task,
        steps=top.get("steps", 1000),
        seed=top.get("seed", 0),
        output_dir=top.get("output_dir", default_output_dir),
    )


def _check_residual_ratio(
    residual: ResidualSettings, model: HeadLayout, task: TaskSpec, lines: Mapping[str, int]
) -> None:
    """Reject a non-zero ratio that would keep no entry of some residual target."""
    ratio = residual.config.ratio
    if ratio == 0.0:
        return
    shapes = ModelParams.expected_shapes(model, task.out_dim)
    for role in residual.targets:
        m, n = shapes[role]
        if ratio * m * n < 1.0:
            raise ConfigError(
                f"{ratio} keeps no entry of the {m}x{n} {role} matrix (needs ratio * m * n >= 1)",
                field="residual.ratio",
                line=lines.get("residual.ratio"),
            )


def apply_overrides(raw: Mapping[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """Copy of `raw` with dotted (or aliased) keys replaced.

    Args:
        raw: Mapping shaped like config/default.yaml
        overrides: {"optimizer.rank": 4, "ratio": 0.006, ...}; None values are skipped

    Returns:
        A new mapping; `raw` is left untouched
    """
    merged = {key: dict(value) if isinstance(value, dict) else value for key, value in raw.items()}
    for key, value in overrides.items():
        if value is None:
            continue
        dotted = FIELD_ALIASES.get(key, key)
        if "." in dotted:
            section, name = dotted.split(".", 1)
            if section not in _SCHEMA:
                raise ConfigError("unknown section", field=dotted)
            current = merged.get(section) or {}
            if not isinstance(current, dict):
                raise ConfigError("must be a mapping", field=section)
            merged[section] = {**current, name: value}
        else:
            merged[dotted] = value
    return merged


def parse_config(
    path: Path,
    overrides: Optional[Mapping[str, Any]] = None,
    default_output_dir: str = DEFAULT_OUTPUT_DIR,
) -> RunConfig:
    """Parse a YAML run configuration.

    Args:
        path: Config file
        overrides: Dotted keys that take precedence over the file
        default_output_dir: Output directory used when neither file nor overrides set one

    Returns:
        The validated RunConfig
    """
    raw, lines = load_raw(path)
    if overrides:
        raw = apply_overrides(raw, overrides)
    config = build_config(raw, lines, default_output_dir)
    logger.debug("parsed %s: method=%s steps=%d seed=%d", path, config.method.value, config.steps, config.seed)
    return config


def config_to_dict(config: RunConfig) -> Dict[str, Any]:
    """Plain mapping shaped like config/default.yaml."""
    optimizer = dataclasses.asdict(config.optimizer)
    projection = dataclasses.asdict(config.projection)
    projection["cross_head_targets"] = list(config.projection.cross_head_targets)
    residual = dataclasses.asdict(config.residual.config)
    residual["targets"] = list(config.residual.targets)
    return {
        "method": config.method.value,
        "steps": config.steps,
        "seed": config.seed,
        "output_dir": config.output_dir,
        "optimizer": optimizer,
        "projection": projection,
        "residual": residual,
        "model": dataclasses.asdict(config.model),
        "task": dataclasses.asdict(config.task),
    }


def dump_config(config: RunConfig, path: Optional[Path] = None) -> str:
    """Serialise a RunConfig to YAML, optionally writing it to `path`."""
    text = yaml.safe_dump(config_to_dict(config), sort_keys=False)
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text

