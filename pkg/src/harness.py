"""
Training Harness

Runs the toy attention model under one of the optimizer variants, collects
per-step metrics (loss, projection error, refresh and step times, optimizer
state accounting) and writes them out. `compare` runs several configurations,
aligns their metrics and renders comparison charts; a sweep over the residual
ratio also produces the ablation table.
"""

import dataclasses
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

from src import reporting
from src.config import Method, RunConfig, apply_overrides, build_config, dump_config
from src.errors import ConfigError, ContractViolation, NumericalAbort, NumericalError
from src.lowrank_adamw import (
    DenseMoments,
    LowRankMoments,
    OptimizerConfig,
    dense_state_elements,
    lowrank_state_elements,
    step_dense,
    step_lowrank,
)
from src.matrix_core import Matrix, SeededRng
from src.projection import (
    ProjectionManager,
    ProjectionMethod,
    RefreshPolicy,
    approximation_error,
)
from src.sparse_residual import DEFAULT_RATIO, SparseResidual, apply_update, index_size
from src.svd import LinalgTracker, RsvdParams
from src.toy_attention import ROLES, ModelParams, backward, forward, init_params, make_task

logger = logging.getLogger(__name__)

# Stream keys derived from the run seed
BATCH_STREAM = 1
STUDENT_INIT = 2
PROJECTION_STREAM = 10


@dataclass(frozen=True)
class StepMetrics:
    """Measurements of one optimizer step.

    Attributes:
        step: One-based step number
        loss: Loss of the batch before the update
        approx_error: Relative projection error per role (0 for dense roles)
        refresh_time_ns: Time spent recomputing projections in this step
        step_time_ns: Time of the whole step
        clamp_count: Residual positions left uncorrected for a negative second-moment estimate
        analytic_state_elements: Optimizer and residual state elements
    """

    step: int
    loss: float
    approx_error: Dict[str, float]
    refresh_time_ns: int
    step_time_ns: int
    clamp_count: int
    analytic_state_elements: int


@dataclass
class RunResult:
    """Summary record and per-step metrics of a finished run."""

    summary: Dict[str, Any]
    metrics: List[StepMetrics] = field(default_factory=list)


class _DenseSlot:
    def __init__(self, shape: Tuple[int, int]):
        self.moments = DenseMoments.zeros(shape)
        self.shape = shape

    @property
    def state_elements(self) -> int:
        return dense_state_elements(self.shape)


class _LowRankSlot:
    def __init__(self, manager: ProjectionManager, shape: Tuple[int, int], residual: Optional[SparseResidual]):
        self.manager = manager
        self.shape = shape
        self.residual = residual
        self.moments: Optional[LowRankMoments] = None
        self.rank = manager.effective_rank(shape)

    @property
    def state_elements(self) -> int:
        elements = lowrank_state_elements(self.shape, self.rank)
        if self.residual is not None:
            elements += 2 * index_size(self.residual.config.ratio, self.shape)
        return elements


def projection_method(method: Method, role: str, cross_head_targets: Sequence[str]) -> ProjectionMethod:
    """Projection used for `role` under `method`."""
    if method is Method.GALORE_EXACT:
        return ProjectionMethod.FULL_SVD
    if method.cross_head and role in cross_head_targets:
        return ProjectionMethod.CROSS_HEAD_RSVD
    return ProjectionMethod.FULL_RSVD


class Trainer:
    """Training loop of one run."""

    def __init__(self, config: RunConfig, clock: Callable[[], int] = time.perf_counter_ns):
        """Build the task, the student and the per-matrix optimizer state.

        Args:
            config: Validated run configuration
            clock: Monotonic nanosecond clock
        """
        self.config = config
        self.clock = clock
        self.tracker = LinalgTracker()
        rng = SeededRng(config.seed)
        layout = config.model

        self.teacher, self.stream = make_task(config.task, layout, rng.spawn(BATCH_STREAM))
        self.params = init_params(layout, config.task.out_dim, rng.spawn(STUDENT_INIT))
        self.slots: Dict[str, Any] = {}
        shapes = ModelParams.expected_shapes(layout, config.task.out_dim)
        policy = RefreshPolicy(config.optimizer.interval)
        rsvd = RsvdParams(
            config.optimizer.rank,
            oversample=config.projection.oversample,
            power_iters=config.projection.power_iters,
        )

        for i, role in enumerate(ROLES):
            if not config.method.lowrank or role == "readout":
                self.slots[role] = _DenseSlot(shapes[role])
                continue
            method = projection_method(config.method, role, config.projection.cross_head_targets)
            manager = ProjectionManager(
                role,
                method,
                config.optimizer.rank,
                policy,
                rsvd,
                rng.spawn(PROJECTION_STREAM + i),
                layout=layout,
                fixed_head=config.projection.head_selection == "fixed",
                tracker=self.tracker,
            )
            residual = None
            if config.method.residual and role in config.residual.targets:
                residual = SparseResidual(config.residual.config)
            self.slots[role] = _LowRankSlot(manager, shapes[role], residual)

        self.dense_baseline = sum(dense_state_elements(shape) for shape in shapes.values())

    @property
    def state_elements(self) -> int:
        return sum(slot.state_elements for slot in self.slots.values())

    def _optimizer_at(self, t: int) -> OptimizerConfig:
        cfg = self.config.optimizer
        if cfg.lr_schedule == "constant":
            return cfg
        return dataclasses.replace(cfg, lr=cfg.learning_rate_at(t, self.config.steps))

    def _step_role(self, role: str, step: int, t: int, w: Matrix, g: Matrix, cfg: OptimizerConfig):
        """New weight, approximation error, refresh time and clamps of one matrix."""
        slot = self.slots[role]
        if isinstance(slot, _DenseSlot):
            update, slot.moments = step_dense(g, slot.moments, cfg)
            return apply_update(w, update, None, cfg), 0.0, 0, 0

        refresh_ns = 0
        if slot.manager.due(step):
            started = self.clock()
            slot.manager.refresh(step, g)
            refresh_ns = self.clock() - started
        proj = slot.manager.state
        if slot.moments is None:
            slot.moments = LowRankMoments.zeros(proj.compact_shape(g.shape))

        update, slot.moments, compact = step_lowrank(g, proj, slot.moments, cfg)
        delta, clamps = None, 0
        residual_scale = 1.0
        if slot.residual is not None:
            before = slot.residual.state.clamp_count
            delta = slot.residual.observe(t, g, proj, compact, cfg)
            clamps = slot.residual.state.clamp_count - before
            residual_scale = slot.residual.config.alpha_res
            if slot.residual.state.active and slot.residual.state.element_count != 2 * index_size(
                slot.residual.config.ratio, g.shape
            ):
                raise ContractViolation(f"{role} residual holds {slot.residual.state.element_count} values")
        error = approximation_error(g, proj)
        return apply_update(w, update, delta, cfg, residual_scale), error, refresh_ns, clamps

    def step(self, step: int) -> StepMetrics:
        """Run zero-based iteration `step` (one-based optimizer step step + 1)."""
        t = step + 1
        started = self.clock()
        batch = self.stream.next_batch()
        try:
            loss, cache = forward(self.params, batch)
        except NumericalError as exc:
            raise NumericalAbort(t, math.nan) from exc
        grads = backward(self.params, batch, cache)
        cfg = self._optimizer_at(t)

        weights = self.params.as_dict()
        gradients = grads.as_dict()
        updated, errors = {}, {}
        refresh_ns = clamps = 0
        for role in ROLES:
            updated[role], errors[role], role_refresh, role_clamps = self._step_role(
                role, step, t, weights[role], gradients[role], cfg
            )
            refresh_ns += role_refresh
            clamps += role_clamps
        self.params = self.params.with_updates(**updated)

        return StepMetrics(
            step=t,
            loss=loss,
            approx_error=errors,
            refresh_time_ns=refresh_ns,
            step_time_ns=max(self.clock() - started, 0),
            clamp_count=clamps,
            analytic_state_elements=self.state_elements,
        )

    def train(self) -> List[StepMetrics]:
        metrics = []
        for step in range(self.config.steps):
            row = self.step(step)
            metrics.append(row)
            if row.step % max(self.config.steps // 10, 1) == 0:
                logger.info("step %d/%d loss=%.6g", row.step, self.config.steps, row.loss)
        return metrics

    def summarize(self, metrics: Sequence[StepMetrics]) -> Dict[str, Any]:
        total_refresh = sum(row.refresh_time_ns for row in metrics)
        total_step = sum(row.step_time_ns for row in metrics)
        peak = max(row.analytic_state_elements for row in metrics)
        refreshes, residual_sizes, index_slots, head_errors = {}, {}, {}, {}
        for role, slot in self.slots.items():
            if isinstance(slot, _LowRankSlot):
                refreshes[role] = slot.manager.refresh_count
                if slot.manager.head_errors:
                    head_errors[role] = slot.manager.head_errors
                if slot.residual is not None and slot.residual.index is not None:
                    residual_sizes[role] = len(slot.residual.index)
                    index_slots[role] = slot.residual.state.index_elements
        return {
            "method": self.config.method.value,
            "seed": self.config.seed,
            "steps": len(metrics),
            "initial_loss": metrics[0].loss,
            "final_loss": metrics[-1].loss,
            "total_refresh_time_ns": total_refresh,
            "total_step_time_ns": total_step,
            "refresh_time_share": total_refresh / total_step if total_step else 0.0,
            "peak_analytic_state_elements": peak,
            "dense_state_elements": self.dense_baseline,
            "state_saving": 1.0 - peak / self.dense_baseline,
            "clamp_count": sum(row.clamp_count for row in metrics),
            "refresh_counts": refreshes,
            "residual_index_sizes": residual_sizes,
            "residual_index_slots": index_slots,
            "head_errors": head_errors,
            "decomposition_shapes": [list(shape) for shape in sorted(set(self.tracker.decompositions))],
        }


def run(config: RunConfig, write: bool = True) -> RunResult:
    """Train one configuration and write its outputs.

    Args:
        config: Validated run configuration
        write: Write metrics.csv, timings.csv, summary.json and config.yaml

    Returns:
        RunResult with the summary and per-step metrics
    """
    output = Path(config.output_dir)
    if write:
        output.mkdir(parents=True, exist_ok=True)
        dump_config(config, output / reporting.CONFIG_FILE)

    logger.info("starting %s run: %d steps, seed %d", config.method.value, config.steps, config.seed)
    trainer = Trainer(config)
    metrics = trainer.train()
    summary = trainer.summarize(metrics)

    if write:
        reporting.write_metrics_csv(output / reporting.METRICS_FILE, metrics, ROLES)
        reporting.write_timings_csv(output / reporting.TIMINGS_FILE, metrics)
        reporting.write_json(output / reporting.SUMMARY_FILE, summary)
        logger.info("wrote run outputs to %s", output)
    return RunResult(summary, metrics)


@dataclass(frozen=True)
class SweepRun:
    """One member of a comparison."""

    label: str
    config: RunConfig
    value: Optional[Any] = None


def sweep_configs(
    raw: Mapping[str, Any],
    sweep_field: Optional[str],
    values: Sequence[Any],
    seeds: int,
    output: Path,
    lines: Optional[Mapping[str, int]] = None,
) -> List[SweepRun]:
    """Configurations for every (sweep value, seed) pair.

    Seeds are base_seed, base_seed + 1, ... Each run writes under output/<label>.

    Args:
        raw: Base config mapping
        sweep_field: Dotted or aliased field swept over (None for a seed-only comparison)
        values: Values of the field
        seeds: Seeds per value
        output: Comparison output directory
        lines: Line numbers of the base config file

    Returns:
        List of SweepRun, values outermost
    """
    if seeds < 1:
        raise ConfigError(f"must be >= 1, got {seeds}", field="seeds")
    base_seed = int(raw.get("seed", 0))
    runs = []
    for value in values if sweep_field else [None]:
        for offset in range(seeds):
            seed = base_seed + offset
            label = f"{sweep_field}={value}/seed={seed}" if sweep_field else f"seed={seed}"
            overrides = {"seed": seed, "output_dir": str(Path(output) / label.replace("/", "_"))}
            if sweep_field:
                overrides[sweep_field] = value
            config = build_config(apply_overrides(raw, overrides), lines)
            runs.append(SweepRun(label, config, value))
    return runs


def _run_member(config: RunConfig) -> RunResult:
    return run(config)


def compare(
    runs: Sequence[SweepRun],
    output: Path,
    workers: int = 1,
    sweep_field: Optional[str] = None,
) -> Dict[str, Any]:
    """Run several configurations and write aligned tables and charts.

    Args:
        runs: Members of the comparison (at least two)
        output: Output directory
        workers: Runs executed concurrently
        sweep_field: Swept field, enables the ablation table for residual ratio sweeps

    Returns:
        Dict with per-run summaries, ablation rows and the trend flag
    """
    if len(runs) < 2:
        raise ConfigError(f"needs at least 2 configurations, got {len(runs)}", field="sweep")
    configs = [member.config for member in runs]
    step_counts = {config.steps for config in configs}
    if len(step_counts) != 1:
        raise ConfigError(f"runs have different step counts {sorted(step_counts)}", field="steps")
    output = Path(output)
    output.mkdir(parents=True, exist_ok=True)

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_member, configs))
    else:
        results = [_run_member(config) for config in configs]

    aligned = [(member.label, result.metrics) for member, result in zip(runs, results)]
    attention_roles = [role for role in ROLES if role != "readout"]
    reporting.write_comparison_csv(output / reporting.COMPARISON_FILE, aligned, attention_roles)
    reporting.plot_comparison(output, aligned, attention_roles)

    report: Dict[str, Any] = {
        "runs": {member.label: result.summary for member, result in zip(runs, results)},
        "ablation": None,
        "flag": None,
    }
    if sweep_field in ("ratio", "residual.ratio"):
        final_losses = [(member.value, result.summary["final_loss"]) for member, result in zip(runs, results)]
        rows, flag = reporting.ablation_rows(final_losses, baseline=0.0, reference=DEFAULT_RATIO)
        reporting.write_ablation_csv(output / reporting.ABLATION_FILE, "ratio", rows)
        report["ablation"], report["flag"] = rows, flag
    reporting.write_json(output / reporting.SUMMARY_FILE, report)
    logger.info("compared %d runs into %s", len(runs), output)
    return report

