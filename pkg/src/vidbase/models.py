"""Per-label binary classifiers: logistic regression, online hinge (SVM),
and Mixture of Experts, with exact analytic gradients and serialization.

All feature vectors are (D+1)-dimensional with a constant-1 last coordinate
acting as the bias feature. The bias coordinate is excluded from L2
regularization. Models carry their Adagrad accumulators so training is
resumable after serialization.
"""

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp

MODEL_MAGIC = b"YT8MMDL0"
MODEL_VERSION = 1

KIND_LOGISTIC = 1
KIND_HINGE = 2
KIND_MOE = 3

PROB_CLAMP = 1e-12
DEFAULT_L2 = 1e-6


class ModelFormatError(Exception):
    pass


def add_bias(x):
    """Append the constant-1 bias feature to a vector or (N, D) matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return np.concatenate([x, [1.0]])
    return np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)


def _clamp(p):
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def log_loss(p, g):
    p = _clamp(np.asarray(p, dtype=np.float64))
    return -(g * np.log(p) + (1.0 - g) * np.log(1.0 - p))


@dataclass
class LogisticModel:
    weights: np.ndarray          # (D+1,)
    l2: float = DEFAULT_L2
    grad_sq: np.ndarray = None   # Adagrad accumulator, same shape

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.grad_sq is None:
            self.grad_sq = np.zeros_like(self.weights)

    @classmethod
    def zeros(cls, dim, l2=DEFAULT_L2):
        return cls(weights=np.zeros(dim + 1), l2=l2)

    @property
    def kind(self):
        return KIND_LOGISTIC


@dataclass
class HingeModel:
    weights: np.ndarray
    margin: float = 1.0
    l2: float = DEFAULT_L2
    grad_sq: np.ndarray = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.margin <= 0:
            raise ValueError("hinge margin must be positive")
        if self.grad_sq is None:
            self.grad_sq = np.zeros_like(self.weights)

    @classmethod
    def zeros(cls, dim, margin=1.0, l2=DEFAULT_L2):
        return cls(weights=np.zeros(dim + 1), margin=margin, l2=l2)

    @property
    def kind(self):
        return KIND_HINGE


@dataclass
class MoEModel:
    """Softmax gating over H experts plus an implicit dummy state whose
    gating weights are zero; each expert is a logistic model."""

    gating: np.ndarray            # (H, D+1)
    experts: np.ndarray           # (H, D+1)
    l2: float = DEFAULT_L2
    gating_grad_sq: np.ndarray = None
    expert_grad_sq: np.ndarray = None

    def __post_init__(self):
        self.gating = np.asarray(self.gating, dtype=np.float64)
        self.experts = np.asarray(self.experts, dtype=np.float64)
        if self.gating.shape != self.experts.shape or self.gating.ndim != 2:
            raise ValueError("gating and expert weights must share shape (H, D+1)")
        if self.gating.shape[0] < 1:
            raise ValueError("need at least one expert")
        if self.gating_grad_sq is None:
            self.gating_grad_sq = np.zeros_like(self.gating)
        if self.expert_grad_sq is None:
            self.expert_grad_sq = np.zeros_like(self.experts)

    @classmethod
    def zeros(cls, dim, n_experts=2, l2=DEFAULT_L2):
        return cls(gating=np.zeros((n_experts, dim + 1)),
                   experts=np.zeros((n_experts, dim + 1)), l2=l2)

    @property
    def n_experts(self):
        return self.gating.shape[0]

    @property
    def kind(self):
        return KIND_MOE


@dataclass
class GradientPair:
    d_gating: np.ndarray
    d_expert: np.ndarray


def logistic_predict(model, x):
    x = np.asarray(x, dtype=np.float64)
    # clamped so extreme scores never underflow to an exact 0 or 1
    return _clamp(expit(x @ model.weights))


def logistic_gradient(model, x, g):
    """Gradient of log_loss(sigmoid(w.x), g) + l2*||w[:-1]||^2 w.r.t. w."""
    x = np.asarray(x, dtype=np.float64)
    p = expit(x @ model.weights)
    grad = (p - g) * x
    reg = 2.0 * model.l2 * model.weights
    reg[-1] = 0.0  # bias unregularized
    return grad + reg


def hinge_predict(model, x):
    """Raw margin score w.x (not a probability)."""
    x = np.asarray(x, dtype=np.float64)
    return x @ model.weights


def hinge_loss_and_subgradient(model, x, g):
    """loss = max(0, b - s*w.x) with s = 2g - 1; zero side taken at the kink."""
    x = np.asarray(x, dtype=np.float64)
    s = 2.0 * g - 1.0
    score = x @ model.weights
    slack = model.margin - s * score
    if slack > 0.0:
        return slack, -s * x
    return 0.0, np.zeros_like(x)


def moe_gating(model, x):
    """Gating probabilities over the H experts (the dummy state takes the
    remaining mass); works on a vector or (N, D+1) matrix."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = np.atleast_2d(x)
    act = batch @ model.gating.T                          # (N, H)
    padded = np.concatenate([np.zeros((batch.shape[0], 1)), act], axis=1)
    norm = logsumexp(padded, axis=1, keepdims=True)
    gate = np.exp(act - norm)
    return gate[0] if single else gate


def moe_predict(model, x):
    """p(y=1 | x) = sum_h p(h | x) * sigmoid(u_h . x); always < 1 because
    the dummy state reserves probability mass."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = np.atleast_2d(x)
    gate = np.atleast_2d(moe_gating(model, batch))
    p_expert = expit(batch @ model.experts.T)
    p = np.sum(gate * p_expert, axis=1)
    return p[0] if single else p


def moe_gradients(model, x, g):
    """Analytic log-loss gradients w.r.t. gating and expert weights
    (regularizer excluded; the trainer adds it)."""
    x = np.asarray(x, dtype=np.float64)
    gate = moe_gating(model, x)                  # (H,)
    p_expert = expit(model.experts @ x)          # (H,)
    p = _clamp(np.sum(gate * p_expert))
    common = (p - g) / (p * (1.0 - p))
    d_gating = np.outer(gate * (p_expert - p) * common, x)
    d_expert = np.outer(gate * p_expert * (1.0 - p_expert) * common, x)
    return GradientPair(d_gating=d_gating, d_expert=d_expert)


def moe_gradients_batch(model, x_batch, g_batch, sample_weights):
    """Weighted sum of per-example gradients over a mini-batch."""
    x_batch = np.atleast_2d(np.asarray(x_batch, dtype=np.float64))
    gate = np.atleast_2d(moe_gating(model, x_batch))        # (N, H)
    p_expert = expit(x_batch @ model.experts.T)             # (N, H)
    p = _clamp(np.sum(gate * p_expert, axis=1))             # (N,)
    common = sample_weights * (p - g_batch) / (p * (1.0 - p))
    d_gating = (gate * (p_expert - p[:, None]) * common[:, None]).T @ x_batch
    d_expert = (gate * p_expert * (1.0 - p_expert) * common[:, None]).T @ x_batch
    return GradientPair(d_gating=d_gating, d_expert=d_expert)


def predict(model, x):
    """Probability-like score for any model kind (hinge scores are mapped
    through a sigmoid so they can be ranked on the same [0, 1] scale)."""
    if model.kind == KIND_LOGISTIC:
        return logistic_predict(model, x)
    if model.kind == KIND_MOE:
        return moe_predict(model, x)
    return expit(hinge_predict(model, x))


def serialize_model(model):
    head = MODEL_MAGIC + struct.pack("<IB", MODEL_VERSION, model.kind)
    if model.kind == KIND_MOE:
        n_experts, dim1 = model.gating.shape
        body = struct.pack("<IId", dim1 - 1, n_experts, model.l2)
        arrays = (model.gating, model.experts,
                  model.gating_grad_sq, model.expert_grad_sq)
    else:
        body = struct.pack("<IId", model.weights.shape[0] - 1, 0, model.l2)
        if model.kind == KIND_HINGE:
            body += struct.pack("<d", model.margin)
        arrays = (model.weights, model.grad_sq)
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                       for a in arrays)
    return head + body + payload


def deserialize_model(blob):
    if blob[:8] != MODEL_MAGIC:
        raise ModelFormatError("bad magic")
    version, kind = struct.unpack_from("<IB", blob, 8)
    if version != MODEL_VERSION:
        raise ModelFormatError("unsupported model version %d" % version)
    off = 13
    try:
        dim, n_experts, l2 = struct.unpack_from("<IId", blob, off)
        off += 16

        def take(shape):
            nonlocal off
            count = int(np.prod(shape))
            end = off + 8 * count
            if end > len(blob):
                raise ModelFormatError("truncated model payload")
            arr = np.frombuffer(blob, dtype="<f8", count=count,
                                offset=off).reshape(shape).copy()
            off = end
            return arr

        if kind == KIND_MOE:
            if n_experts < 1:
                raise ModelFormatError("MoE model requires H >= 1")
            shape = (n_experts, dim + 1)
            return MoEModel(gating=take(shape), experts=take(shape), l2=l2,
                            gating_grad_sq=take(shape),
                            expert_grad_sq=take(shape))
        if kind == KIND_HINGE:
            (margin,) = struct.unpack_from("<d", blob, off)
            off += 8
            return HingeModel(weights=take((dim + 1,)), margin=margin, l2=l2,
                              grad_sq=take((dim + 1,)))
        if kind == KIND_LOGISTIC:
            return LogisticModel(weights=take((dim + 1,)), l2=l2,
                                 grad_sq=take((dim + 1,)))
    except struct.error as exc:
        raise ModelFormatError("truncated model payload") from exc
    raise ModelFormatError("unknown model kind %d" % kind)
