"""
Toy Multi-Head Attention Model

A single attention layer with a linear readout, trained on a teacher
regression task. Forward and backward passes are written out by hand so the
concatenated W^Q, W^K, W^V, W^O gradients are exact and cheap at desk scale.
The teacher's query/key heads share a common basis, which gives student
gradients the cross-head similarity the cross-head projection relies on.
"""

import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from src.errors import ContractViolation, DimensionError, NumericalError, ParameterError
from src.matrix_core import Matrix, SeededRng, qr_thin
from src.projection import HeadLayout

logger = logging.getLogger(__name__)

ROLES = ("wq", "wk", "wv", "wo", "readout")


@dataclass
class ModelParams:
    """Weights of the attention layer and readout (gradients use the same type).

    Attributes:
        wq: d_model x (h * d_k) concatenated query transform
        wk: d_model x (h * d_k) concatenated key transform
        wv: d_model x (h * d_v) concatenated value transform
        wo: (h * d_v) x d_model output mix
        readout: d_model x out_dim
        layout: Head layout the shapes follow
    """

    wq: Matrix
    wk: Matrix
    wv: Matrix
    wo: Matrix
    readout: Matrix
    layout: HeadLayout

    def __post_init__(self):
        out_dim = self.readout.shape[1] if self.readout.ndim == 2 else -1
        expected = self.expected_shapes(self.layout, out_dim)
        for role in ROLES:
            shape = getattr(self, role).shape
            if shape != expected[role]:
                raise DimensionError(f"{role} has shape {shape}, expected {expected[role]}")

    @staticmethod
    def expected_shapes(layout: HeadLayout, out_dim: int) -> Dict[str, Tuple[int, int]]:
        return {
            "wq": layout.qk_shape,
            "wk": layout.qk_shape,
            "wv": layout.v_shape,
            "wo": (layout.heads * layout.d_v, layout.d_model),
            "readout": (layout.d_model, out_dim),
        }

    @property
    def out_dim(self) -> int:
        return self.readout.shape[1]

    def as_dict(self) -> Dict[str, Matrix]:
        return {role: getattr(self, role) for role in ROLES}

    def with_updates(self, **matrices: Matrix) -> "ModelParams":
        values = self.as_dict()
        values.update(matrices)
        return ModelParams(layout=self.layout, **values)

    def copy(self) -> "ModelParams":
        return ModelParams(layout=self.layout, **{role: m.copy() for role, m in self.as_dict().items()})


@dataclass(frozen=True)
class Batch:
    """Token embeddings (batch x seq_len x d_model) and targets (batch x out_dim)."""

    inputs: np.ndarray
    targets: Matrix

    def __post_init__(self):
        if self.inputs.ndim != 3 or self.inputs.shape[1] < 1:
            raise DimensionError(f"inputs must be batch x seq_len x d_model with seq_len >= 1, got {self.inputs.shape}")
        if self.targets.ndim != 2 or self.targets.shape[0] != self.inputs.shape[0]:
            raise DimensionError(f"targets shape {self.targets.shape} does not match batch {self.inputs.shape[0]}")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.targets))):
            raise NumericalError("batch contains non-finite values", stage="batch")


@dataclass(frozen=True)
class TaskSpec:
    """Teacher regression task.

    Attributes:
        kind: Task family (only "teacher-regression")
        teacher_seed: Seed of the teacher weights
        noise_std: Standard deviation of target noise
        batch_size: Sequences per batch
        seq_len: Tokens per sequence
        out_dim: Regression outputs
        head_perturbation: Size of the per-head deviation from the shared basis
    """

    kind: str = "teacher-regression"
    teacher_seed: int = 1234
    noise_std: float = 0.01
    batch_size: int = 8
    seq_len: int = 16
    out_dim: int = 4
    head_perturbation: float = 0.2

    def __post_init__(self):
        if self.kind != "teacher-regression":
            raise ParameterError(f"unknown task kind {self.kind!r}", field="kind")
        if self.noise_std < 0:
            raise ParameterError(f"must be >= 0, got {self.noise_std}", field="noise_std")
        for name in ("batch_size", "seq_len", "out_dim"):
            if getattr(self, name) < 1:
                raise ParameterError(f"must be >= 1, got {getattr(self, name)}", field=name)
        if self.head_perturbation < 0:
            raise ParameterError(f"must be >= 0, got {self.head_perturbation}", field="head_perturbation")


@dataclass(frozen=True)
class ForwardCache:
    """Intermediates of a forward pass, tied to the (params, batch) they came from."""

    fingerprint: str
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attention: np.ndarray
    concat: np.ndarray
    pooled: Matrix
    prediction: Matrix


def _fingerprint(params: ModelParams, batch: Batch) -> str:
    digest = hashlib.blake2b(digest_size=16)
    for matrix in params.as_dict().values():
        digest.update(np.ascontiguousarray(matrix).tobytes())
    digest.update(np.ascontiguousarray(batch.inputs).tobytes())
    digest.update(np.ascontiguousarray(batch.targets).tobytes())
    return digest.hexdigest()


def _ensure_finite(array: np.ndarray, stage: str) -> None:
    if not np.all(np.isfinite(array)):
        raise NumericalError(f"non-finite values in {stage}", stage=stage)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    b, s, width = x.shape
    return x.reshape(b, s, heads, width // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, s, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, h * d)


def softmax(scores: np.ndarray) -> np.ndarray:
    """Row softmax over the last axis."""
    shifted = np.exp(scores - scores.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def _forward_pass(params: ModelParams, inputs: np.ndarray):
    layout = params.layout
    if inputs.ndim != 3 or inputs.shape[2] != layout.d_model:
        raise DimensionError(f"inputs shape {inputs.shape} does not match d_model {layout.d_model}")

    q = _split_heads(inputs @ params.wq, layout.heads)
    k = _split_heads(inputs @ params.wk, layout.heads)
    v = _split_heads(inputs @ params.wv, layout.heads)
    _ensure_finite(q, "projections")
    _ensure_finite(k, "projections")
    _ensure_finite(v, "projections")

    scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(layout.d_k)
    _ensure_finite(scores, "scores")
    attention = softmax(scores)
    concat = _merge_heads(attention @ v)
    output = concat @ params.wo
    _ensure_finite(output, "output")
    pooled = output.mean(axis=1)
    prediction = pooled @ params.readout
    _ensure_finite(prediction, "prediction")
    return q, k, v, attention, concat, pooled, prediction


def predict(params: ModelParams, inputs: np.ndarray) -> Matrix:
    """Model output for a batch of sequences."""
    return _forward_pass(params, inputs)[-1]


def forward(params: ModelParams, batch: Batch) -> Tuple[float, ForwardCache]:
    """Mean-squared-error loss and the intermediates needed by backward.

    Args:
        params: Model weights
        batch: Inputs and targets

    Returns:
        Tuple of (loss, cache)
    """
    q, k, v, attention, concat, pooled, prediction = _forward_pass(params, batch.inputs)
    if prediction.shape != batch.targets.shape:
        raise DimensionError(f"prediction shape {prediction.shape} does not match targets {batch.targets.shape}")
    loss = float(np.mean((prediction - batch.targets) ** 2))
    if not math.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss!r}", stage="loss")
    cache = ForwardCache(_fingerprint(params, batch), q, k, v, attention, concat, pooled, prediction)
    return loss, cache


def backward(params: ModelParams, batch: Batch, cache: ForwardCache) -> ModelParams:
    """Exact gradients of the loss with respect to all five matrices.

    Args:
        params: Weights the cache was computed with
        batch: Batch the cache was computed with
        cache: Result of forward(params, batch)

    Returns:
        ModelParams holding the gradients
    """
    if cache.fingerprint != _fingerprint(params, batch):
        raise ContractViolation("forward cache does not belong to these parameters and batch")
    layout = params.layout
    inputs = batch.inputs
    seq_len = inputs.shape[1]

    d_prediction = 2.0 * (cache.prediction - batch.targets) / cache.prediction.size
    d_readout = cache.pooled.T @ d_prediction
    d_pooled = d_prediction @ params.readout.T
    d_output = np.broadcast_to(d_pooled[:, None, :] / seq_len, (inputs.shape[0], seq_len, layout.d_model))

    d_wo = np.einsum("bsi,bsj->ij", cache.concat, d_output)
    d_heads = _split_heads(d_output @ params.wo.T, layout.heads)

    d_attention = d_heads @ cache.v.transpose(0, 1, 3, 2)
    d_v = cache.attention.transpose(0, 1, 3, 2) @ d_heads
    d_scores = cache.attention * (d_attention - np.sum(d_attention * cache.attention, axis=-1, keepdims=True))
    d_scores /= math.sqrt(layout.d_k)
    d_q = d_scores @ cache.k
    d_k = d_scores.transpose(0, 1, 3, 2) @ cache.q

    d_wq = np.einsum("bsd,bsj->dj", inputs, _merge_heads(d_q))
    d_wk = np.einsum("bsd,bsj->dj", inputs, _merge_heads(d_k))
    d_wv = np.einsum("bsd,bsj->dj", inputs, _merge_heads(d_v))
    return ModelParams(d_wq, d_wk, d_wv, d_wo, d_readout, layout)


def _shared_basis_heads(layout: HeadLayout, rng: SeededRng, perturbation: float) -> Matrix:
    """Concatenated query/key transform whose head column spaces cluster around one basis."""
    if layout.d_k > layout.d_model:
        raise ParameterError(f"d_k {layout.d_k} exceeds d_model {layout.d_model}")
    shared = qr_thin(rng.standard_normal(layout.d_model, layout.d_k))
    blocks = []
    for _ in range(layout.heads):
        noise = rng.standard_normal(layout.d_model, layout.d_k) / math.sqrt(layout.d_model)
        head_basis = qr_thin(shared + perturbation * noise)
        mixing = rng.standard_normal(layout.d_k, layout.d_k) / math.sqrt(layout.d_k)
        blocks.append(head_basis @ mixing)
    return np.hstack(blocks)


def init_params(layout: HeadLayout, out_dim: int, rng: SeededRng, scale: float = 1.0) -> ModelParams:
    """Gaussian weights with fan-in scaling."""
    def gaussian(rows: int, cols: int) -> Matrix:
        return rng.standard_normal(rows, cols) * (scale / math.sqrt(rows))

    return ModelParams(
        wq=gaussian(*layout.qk_shape),
        wk=gaussian(*layout.qk_shape),
        wv=gaussian(*layout.v_shape),
        wo=gaussian(layout.heads * layout.d_v, layout.d_model),
        readout=gaussian(layout.d_model, out_dim),
        layout=layout,
    )


class BatchStream:
    """Endless seeded stream of teacher-labelled batches."""

    def __init__(self, teacher: ModelParams, spec: TaskSpec, rng: SeededRng):
        self.teacher = teacher
        self.spec = spec
        self.rng = rng

    def next_batch(self) -> Batch:
        spec = self.spec
        inputs = self.rng.normal_array((spec.batch_size, spec.seq_len, self.teacher.layout.d_model))
        targets = predict(self.teacher, inputs)
        if spec.noise_std > 0:
            targets = targets + self.rng.normal_array(targets.shape, spec.noise_std)
        return Batch(inputs, targets)


def make_task(spec: TaskSpec, layout: HeadLayout, rng: SeededRng) -> Tuple[ModelParams, BatchStream]:
    """Frozen teacher and a batch stream labelled by it.

    The teacher comes from spec.teacher_seed; batches come from `rng`.

    Args:
        spec: Task settings
        layout: Head layout of teacher and student
        rng: Stream of the batch inputs and target noise

    Returns:
        Tuple of (teacher params, batch stream)
    """
    teacher_rng = SeededRng(spec.teacher_seed)
    wq = _shared_basis_heads(layout, teacher_rng, spec.head_perturbation)
    wk = _shared_basis_heads(layout, teacher_rng, spec.head_perturbation)
    rest = init_params(layout, spec.out_dim, teacher_rng)
    teacher = rest.with_updates(wq=wq, wk=wk)
    logger.debug("built teacher task %s with layout %s", spec, layout)
    return teacher, BatchStream(teacher, spec, rng)
