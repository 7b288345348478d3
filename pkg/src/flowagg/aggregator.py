"""Occlusion-aware aggregation of per-point motion features.

Each point carries a context feature (what it is) and a motion feature
(how it moves). Motion features are unreliable exactly where the second
frame offers no counterpart, so this module lets every point borrow
motion from points with similar context along two routes:

* a global route: scaled dot-product attention over projected context
  features, spanning the whole cloud;
* a local route: scores over the point's k nearest spatial neighbours,
  computed from an encoded displacement together with both endpoints'
  context.

Both routes produce convex combinations of value-projected motion
features. Their sum enters a gated residual correction: the difference
between the original motion feature and the aggregate passes through a
linear/normalize/ReLU head, is scaled by a learnable gate that starts at
zero, and is added back. At initialization the module is therefore an
exact identity on motion features.

All forward math runs through :mod:`.tensor` primitives, so recording a
tape during the call yields exact gradients for every parameter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import Xoshiro256StarStar, derive_seed
from .spatial import NeighborIndex, PointCloud
from .tensor import MlpParams, NormActParams, ShapeError, Tensor


@dataclass
class AggregatorConfig:
    """Dimensions and behaviour switches of the aggregation module.

    context_dim/motion_dim are the widths of the input features, qk_dim
    the attention projection width, disp_dim the displacement-encoder
    output width, k the local neighbourhood size.

    scale_logits divides attention logits by sqrt(qk_dim).
    raw_context_logits computes them from unprojected context features.
    use_weight_mlp enables the extra positive per-weight map on the global
    attention (off by default; it is redundant right after a softmax).
    cross_frame_displacements encodes frame-2 counterpart minus frame-1
    point instead of the in-frame displacement; the forward call then
    needs a row-aligned counterpart cloud, which only unoccluded scenes
    provide.
    disable_local / disable_global zero out the respective route;
    plain_aggregator replaces the gated residual correction with
    y + MLP(aggregate), no normalization and no gate.
    """

    context_dim: int = 32
    motion_dim: int = 32
    qk_dim: int = 16
    disp_dim: int = 8
    k: int = 16
    scale_logits: bool = True
    raw_context_logits: bool = False
    use_weight_mlp: bool = False
    cross_frame_displacements: bool = False
    include_self_neighbors: bool = False
    disable_local: bool = False
    disable_global: bool = False
    plain_aggregator: bool = False
    disp_hidden: tuple[int, ...] = (16,)
    score_hidden: tuple[int, ...] = (32,)
    weight_hidden: tuple[int, ...] = (8,)
    plain_hidden: tuple[int, ...] = (32,)

    def validate(self) -> None:
        for name in ("context_dim", "motion_dim", "qk_dim", "disp_dim", "k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.disable_local and self.disable_global and not self.plain_aggregator:
            # Legal, but the module reduces to the gate acting on
            # norm_act_head(y); nothing forbids it.
            pass


@dataclass(frozen=True)
class FeatureSet:
    """Per-point inputs: context (N x Dc) and motion (N x Dm)."""

    context: np.ndarray
    motion: np.ndarray

    def __post_init__(self):
        c = np.ascontiguousarray(self.context, dtype=np.float64)
        m = np.ascontiguousarray(self.motion, dtype=np.float64)
        if c.ndim != 2 or m.ndim != 2 or c.shape[0] != m.shape[0]:
            raise ShapeError(f"context {c.shape} and motion {m.shape} must share N")
        if (c.size and not np.isfinite(c).all()) or (m.size and not np.isfinite(m).all()):
            raise ValueError("features must be finite")
        object.__setattr__(self, "context", c)
        object.__setattr__(self, "motion", m)

    def __len__(self) -> int:
        return self.context.shape[0]


@dataclass(frozen=True)
class AttentionMap:
    """Weights actually used in one forward call, for inspection.

    global_weights is N x N row-stochastic; local_weights is N x k aligned
    with the NeighborIndex rows. A disabled route leaves its entry None.
    """

    global_weights: np.ndarray | None
    local_weights: np.ndarray | None


@dataclass
class AggregatorParams:
    """All learnable state of the module.

    qk_proj is the single shared query/key projection (Dc x Dqk): queries
    and keys are the same linear map of context. v_proj maps motion
    features (Dm x Dm). alpha is the scalar residual gate, initialized to
    zero. weight_mlp and plain_head exist only when the corresponding
    config switches ask for them.
    """

    qk_proj: Tensor
    v_proj: Tensor
    disp_encoder: MlpParams
    score: MlpParams
    offset_head: NormActParams
    alpha: Tensor
    weight_mlp: MlpParams | None = None
    plain_head: MlpParams | None = None

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        """Fixed-order (name, tensor) pairs; the order is the container
        serialization order and the optimizer's update order."""
        out = [("qk_proj", self.qk_proj), ("v_proj", self.v_proj)]
        out.extend(self.disp_encoder.named_tensors("disp_encoder"))
        out.extend(self.score.named_tensors("score"))
        out.extend(self.offset_head.named_tensors("offset_head"))
        out.append(("alpha", self.alpha))
        if self.weight_mlp is not None:
            out.extend(self.weight_mlp.named_tensors("weight_mlp"))
        if self.plain_head is not None:
            out.extend(self.plain_head.named_tensors("plain_head"))
        return out


def _uniform_init(rng: Xoshiro256StarStar, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor((rng.uniform_array(shape) * 2.0 - 1.0) * bound, trainable=True)


def _init_mlp(rng: Xoshiro256StarStar, dims: tuple[int, ...]) -> MlpParams:
    layers = []
    for din, dout in zip(dims[:-1], dims[1:]):
        layers.append((_uniform_init(rng, (din, dout), din),
                       _uniform_init(rng, (dout,), din)))
    return MlpParams(layers)


def init_params(config: AggregatorConfig, seed: int) -> AggregatorParams:
    """Fresh parameters: weights and biases uniform in +-1/sqrt(fan_in),
    normalization gain 1 / shift 0, gate alpha 0.

    The core tensors draw from one stream and the optional stages
    (weight_mlp, plain_head) from a second, so configurations that differ
    only in optional stages share bit-identical core initialization.
    """
    config.validate()
    dc, dm = config.context_dim, config.motion_dim
    core = Xoshiro256StarStar(derive_seed(seed, 0))
    extras = Xoshiro256StarStar(derive_seed(seed, 1))
    params = AggregatorParams(
        qk_proj=_uniform_init(core, (dc, config.qk_dim), dc),
        v_proj=_uniform_init(core, (dm, dm), dm),
        disp_encoder=_init_mlp(core, (3, *config.disp_hidden, config.disp_dim)),
        score=_init_mlp(core, (config.disp_dim + 2 * dc, *config.score_hidden, 1)),
        offset_head=NormActParams(
            weight=_uniform_init(core, (dm, dm), dm),
            bias=_uniform_init(core, (dm,), dm),
            gain=Tensor(np.ones(dm), trainable=True),
            shift=Tensor(np.zeros(dm), trainable=True),
        ),
        alpha=Tensor(np.zeros(()), trainable=True),
    )
    if config.use_weight_mlp:
        params.weight_mlp = _init_mlp(extras, (1, *config.weight_hidden, 1))
    if config.plain_aggregator:
        params.plain_head = _init_mlp(extras, (dm, *config.plain_hidden, dm))
    return params


def _check_dims(params: AggregatorParams, feats: FeatureSet, config: AggregatorConfig) -> None:
    dc, dm = config.context_dim, config.motion_dim
    if feats.context.shape[1] != dc or feats.motion.shape[1] != dm:
        raise ShapeError(
            f"features ({feats.context.shape[1]}, {feats.motion.shape[1]}) do not match "
            f"configured dims ({dc}, {dm})")
    if params.qk_proj.shape != (dc, config.qk_dim) or params.v_proj.shape != (dm, dm):
        raise ShapeError(
            f"projections {params.qk_proj.shape}/{params.v_proj.shape} do not match "
            f"config dims Dc={dc}, Dqk={config.qk_dim}, Dm={dm}")


def project_qkv(params: AggregatorParams, feats: FeatureSet,
                config: AggregatorConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Query, key, and value projections.

    The query and key projections share one weight matrix, so the returned
    q and k are the same tensor (one matmul, gradients from both uses
    accumulate on it). v applies the motion-feature projection.
    """
    _check_dims(params, feats, config)
    x = T.tensor(feats.context)
    qk = T.matmul(x, params.qk_proj)
    v = T.matmul(T.tensor(feats.motion), params.v_proj)
    return qk, qk, v


def global_attention_weights(params: AggregatorParams, q: Tensor, k: Tensor,
                             config: AggregatorConfig) -> Tensor:
    """Row-stochastic N x N attention over context similarity.

    Logits are q_i . k_j, divided by sqrt(qk_dim) when scale_logits is
    set; rows pass through a softmax. With use_weight_mlp, each weight is
    additionally mapped through a small MLP whose output goes through a
    softplus (keeping it positive), and rows are renormalized to sum 1.
    """
    logits = T.matmul(q, T.transpose2(k))
    if config.scale_logits:
        logits = T.scale(logits, 1.0 / np.sqrt(q.data.shape[1]))
    w = T.softmax_rows(logits)
    if config.use_weight_mlp:
        if params.weight_mlp is None:
            raise ShapeError("use_weight_mlp is set but params carry no weight_mlp")
        n = w.data.shape[0]
        flat = T.reshape(w, (n * n, 1))
        pos = T.softplus(T.mlp_forward(params.weight_mlp, flat))
        grid = T.reshape(pos, (n, n))
        w = T.div(grid, T.reduce_sum(grid, axis=1, keepdims=True))
    return w


def aggregate_global(weights: Tensor, v: Tensor) -> Tensor:
    """Blend value rows by attention weights: weights @ v."""
    if weights.data.ndim != 2 or weights.data.shape[1] != v.data.shape[0]:
        raise ShapeError(f"aggregate_global: weights {weights.shape} do not "
                         f"match values {v.shape}")
    return T.matmul(weights, v)


def aggregate_local(params: AggregatorParams, cloud: PointCloud, feats: FeatureSet,
                    v: Tensor, nbrs: NeighborIndex, config: AggregatorConfig,
                    counterparts: PointCloud | None = None) -> tuple[Tensor, Tensor]:
    """Neighbourhood aggregation: per point, a softmax over its k
    neighbours' scores, applied to their value rows.

    The score of neighbour j of point i is an MLP over [encoded
    displacement, context_j, context_i]. Displacements default to
    p_j - p_i within frame 1; with cross_frame_displacements the j
    endpoint is taken from the row-aligned counterpart cloud instead.

    Returns (g_local: N x Dm, local_weights: N x k).
    """
    n = len(feats)
    if len(cloud) != n:
        raise ShapeError(f"cloud has {len(cloud)} points but features have {n}")
    if nbrs.indices.shape[0] != n:
        raise ShapeError(f"neighbour table rows {nbrs.indices.shape[0]} != N {n}")
    k = nbrs.k
    flat_idx = nbrs.indices.reshape(-1)

    if config.cross_frame_displacements:
        if counterparts is None or len(counterparts) != n:
            raise ShapeError(
                "cross_frame_displacements needs a counterpart cloud row-aligned "
                "with frame 1 (unoccluded scenes only)")
        endpoint = counterparts.points
    else:
        endpoint = cloud.points
    disp = endpoint[flat_idx] - np.repeat(cloud.points, k, axis=0)

    enc = T.mlp_forward(params.disp_encoder, T.tensor(disp))
    score_in = T.concat_cols([
        enc,
        T.tensor(feats.context[flat_idx]),
        T.tensor(np.repeat(feats.context, k, axis=0)),
    ])
    scores = T.mlp_forward(params.score, score_in)
    weights = T.softmax_rows(T.reshape(scores, (n, k)))

    picked = T.gather_rows(v, flat_idx)
    weighted = T.mul(picked, T.reshape(weights, (n * k, 1)))
    g_local = T.reduce_sum(T.reshape(weighted, (n, k, v.data.shape[1])), axis=1)
    return g_local, weights


def offset_aggregate(params: AggregatorParams, y: Tensor,
                     g_local: Tensor, g_global: Tensor) -> Tensor:
    """Gated residual correction of motion features.

    The head sees y - (g_local + g_global); its output is scaled by the
    learnable gate alpha and added to y. With alpha at its initial value
    0, the result is y unchanged, bit for bit.
    """
    if y.data.shape != g_local.data.shape or y.data.shape != g_global.data.shape:
        raise ShapeError(f"offset_aggregate: shapes differ: y {y.shape}, "
                         f"g_local {g_local.shape}, g_global {g_global.shape}")
    resid = T.sub(y, T.add(g_local, g_global))
    g_offset = T.norm_act_head(params.offset_head, resid)
    return T.add(y, T.mul(g_offset, params.alpha))


def forward(params: AggregatorParams, cloud: PointCloud, feats: FeatureSet,
            nbrs: NeighborIndex, config: AggregatorConfig,
            counterparts: PointCloud | None = None) -> tuple[Tensor, AttentionMap]:
    """Full pass: project, attend globally and locally, correct.

    Returns the corrected motion features (N x Dm) and the attention maps
    used. Record on a tape to differentiate through the whole thing.
    """
    n = len(feats)
    if n < 2:
        raise ShapeError("forward needs at least 2 points (normalization head)")
    if config.raw_context_logits:
        _check_dims(params, feats, config)
        x = T.tensor(feats.context)
        q = k = x
        v = T.matmul(T.tensor(feats.motion), params.v_proj)
    else:
        q, k, v = project_qkv(params, feats, config)
    y = T.tensor(feats.motion)
    dm = config.motion_dim

    if config.disable_global:
        g_global = T.tensor(np.zeros((n, dm)))
        global_w = None
    else:
        w = global_attention_weights(params, q, k, config)
        g_global = aggregate_global(w, v)
        global_w = w.data

    if config.disable_local:
        g_local = T.tensor(np.zeros((n, dm)))
        local_w = None
    else:
        g_local, lw = aggregate_local(params, cloud, feats, v, nbrs, config,
                                      counterparts=counterparts)
        local_w = lw.data

    if config.plain_aggregator:
        if params.plain_head is None:
            raise ShapeError("plain_aggregator is set but params carry no plain_head")
        y_tilde = T.add(y, T.mlp_forward(params.plain_head, T.add(g_local, g_global)))
    else:
        y_tilde = offset_aggregate(params, y, g_local, g_global)
    return y_tilde, AttentionMap(global_weights=global_w, local_weights=local_w)


def downstream_features(y_tilde: Tensor, feats: FeatureSet) -> Tensor:
    """What a consuming network would receive: corrected motion features
    concatenated with the original motion and context features."""
    return T.concat_cols([y_tilde, T.tensor(feats.motion), T.tensor(feats.context)])
