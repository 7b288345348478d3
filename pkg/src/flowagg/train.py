"""Training loop, gradient verification, and the occlusion experiments.

Everything here is deterministic given the run config: parameter draws,
scene generation, and update order are all seeded, so a rerun reproduces
the loss series to the last bit and serialized outputs byte for byte.
Wall-clock time is measured but deliberately kept out of the serialized
report; it goes to stdout only.
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .aggregator import (AggregatorConfig, AggregatorParams, FeatureSet, forward,
                         init_params)
from .config import RunConfig, TrainSettings, render_config
from .metrics import FlowField, FlowMetrics, evaluate_split
from .rng import Xoshiro256StarStar, derive_seed
from .scenegen import SyntheticScene, generate_scene
from .spatial import NeighborIndex, PointCloud, knn
from .tensor import Gradients, Tape, Tensor, backward, finite_diff_grad


class DivergenceError(ArithmeticError):
    """Raised when the training loss stops being finite."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step


@dataclass
class DecoderParams:
    """Linear readout from aggregated motion features to a flow vector."""

    weight: Tensor  # Dm x 3
    bias: Tensor    # (3,)

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return [("decoder.weight", self.weight), ("decoder.bias", self.bias)]


def init_decoder(motion_dim: int, seed: int) -> DecoderParams:
    rng = Xoshiro256StarStar(derive_seed(seed, 2))
    bound = 1.0 / np.sqrt(motion_dim)
    return DecoderParams(
        weight=Tensor((rng.uniform_array((motion_dim, 3)) * 2.0 - 1.0) * bound,
                      trainable=True),
        bias=Tensor((rng.uniform_array((3,)) * 2.0 - 1.0) * bound, trainable=True),
    )


def decode_flow(decoder: DecoderParams, y_tilde: Tensor) -> Tensor:
    """Per-point linear readout, N x 3."""
    return T.add(T.matmul(y_tilde, decoder.weight), decoder.bias)


def loss_epe(pred: Tensor, gt) -> Tensor:
    """Mean squared Euclidean flow error as a differentiable scalar."""
    gt = gt.vectors if isinstance(gt, FlowField) else np.asarray(gt, dtype=np.float64)
    if pred.data.shape != gt.shape:
        raise T.ShapeError(f"loss_epe: prediction {pred.data.shape} vs target {gt.shape}")
    diff = T.sub(pred, T.tensor(gt))
    return T.scale(T.reduce_sum(T.mul(diff, diff)), 1.0 / gt.shape[0])


class Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, named: list[tuple[str, Tensor]], grads: Gradients) -> None:
        for _, t in named:
            t.data = t.data - self.lr * grads.wrt(t)


class Adam:
    """Plain Adam with bias correction; state keyed by parameter name."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, named: list[tuple[str, Tensor]], grads: Gradients) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, t in named:
            g = grads.wrt(t)
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(t.data)
                self.v[name] = np.zeros_like(t.data)
            v = self.v[name]
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            t.data = t.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _make_optimizer(ts: TrainSettings):
    if ts.optimizer == "sgd":
        return Sgd(ts.learning_rate)
    return Adam(ts.learning_rate, ts.beta1, ts.beta2, ts.adam_eps)


@dataclass
class ExperimentReport:
    """Outcome of one training run.

    loss_series has one entry per optimization step (length 0 when
    steps=0, in which case the metrics describe the initial model).
    wall_time_s is informational and excluded from serialization so that
    report files depend only on (config, seed).
    """

    loss_series: list[float]
    metrics_occluded: FlowMetrics | None
    metrics_visible: FlowMetrics | None
    metrics_all: FlowMetrics
    config_text: str
    wall_time_s: float
    params: AggregatorParams
    decoder: DecoderParams


def report_lines(report: ExperimentReport) -> list[str]:
    """Serialize a report as key=value lines (deterministic; excludes
    wall time)."""
    lines = [f"config.{line}" for line in report.config_text.strip().splitlines()]
    lines.append("steps=" + str(len(report.loss_series)))
    lines.append("loss_series=" + ",".join(repr(v) for v in report.loss_series))
    for split, m in (("occluded", report.metrics_occluded),
                     ("visible", report.metrics_visible),
                     ("all", report.metrics_all)):
        if m is None:
            continue
        lines.append(f"final_epe_{split}={m.epe_m!r}")
        lines.append(f"final_acc_strict_{split}={m.acc_strict!r}")
        lines.append(f"final_acc_relax_{split}={m.acc_relax!r}")
        lines.append(f"final_outliers_{split}={m.outliers!r}")
        lines.append(f"final_n_points_{split}={m.n_points}")
    return lines


def named_model_tensors(params: AggregatorParams,
                        decoder: DecoderParams) -> list[tuple[str, np.ndarray]]:
    """All model arrays in serialization order, for the tensor container."""
    return ([(name, t.data) for name, t in params.named_tensors()]
            + [(name, t.data) for name, t in decoder.named_tensors()])


def _scene_neighbors(scene: SyntheticScene, module: AggregatorConfig) -> NeighborIndex:
    return knn(scene.frame1, scene.frame1, module.k,
               include_self=module.include_self_neighbors)


def _predict(params: AggregatorParams, decoder: DecoderParams,
             scene: SyntheticScene, nbrs: NeighborIndex,
             module: AggregatorConfig) -> tuple[Tensor, Tensor]:
    feats = FeatureSet(scene.context, scene.motion_in)
    y_tilde, _ = forward(params, scene.frame1, feats, nbrs, module)
    return decode_flow(decoder, y_tilde), y_tilde


def train(cfg: RunConfig, scene: SyntheticScene | None = None) -> ExperimentReport:
    """Supervised training of the aggregator plus decoder on one scene.

    The scene is generated from cfg.scene unless passed in. Loss is mean
    squared flow error over all points, occluded included; metrics in the
    report are split by the ground-truth occlusion mask.
    """
    cfg.train.validate()
    cfg.module.validate()
    started = time.perf_counter()
    if scene is None:
        scene = generate_scene(cfg.scene)
    nbrs = _scene_neighbors(scene, cfg.module)
    params = init_params(cfg.module, cfg.train.seed)
    decoder = init_decoder(cfg.module.motion_dim, cfg.train.seed)
    named = params.named_tensors() + decoder.named_tensors()
    if cfg.train.freeze_alpha:
        named = [(n, t) for n, t in named if n != "alpha"]
    opt = _make_optimizer(cfg.train)

    losses: list[float] = []
    for step in range(cfg.train.steps):
        with Tape() as tape:
            pred, _ = _predict(params, decoder, scene, nbrs, cfg.module)
            loss = loss_epe(pred, scene.gt_flow)
        value = float(loss.data)
        if not math.isfinite(value):
            raise DivergenceError(step, value)
        losses.append(value)
        opt.step(named, backward(tape, loss))

    pred, _ = _predict(params, decoder, scene, nbrs, cfg.module)
    if not np.isfinite(pred.data).all():
        raise DivergenceError(cfg.train.steps, float("nan"))
    occ, vis, everything = evaluate_split(
        FlowField(pred.data), scene.gt_flow, scene.occlusion_mask)
    return ExperimentReport(
        loss_series=losses,
        metrics_occluded=occ,
        metrics_visible=vis,
        metrics_all=everything,
        config_text=render_config(cfg),
        wall_time_s=time.perf_counter() - started,
        params=params,
        decoder=decoder,
    )


def grad_check(cfg: RunConfig | None = None, corrupt: bool = False) -> float:
    """Worst relative disagreement between reverse-mode gradients and
    central finite differences, over every parameter tensor.

    Builds a small random instance from the config seeds, sets the
    residual gate to a nonzero value (at its zero init most parameters
    receive exactly zero gradient, which would make the check vacuous),
    and compares per coordinate with |analytic - numeric| / max(1,
    |numeric|). ``corrupt`` injects a deliberate error into one analytic
    gradient; the result must then be large (negative control).
    """
    if cfg is None:
        cfg = default_gradcheck_config()
    module = cfg.module
    rng = Xoshiro256StarStar(derive_seed(cfg.train.seed, 3))
    n = max(module.k + 1, 12)
    cloud = PointCloud(rng.uniform_array((n, 3)) * 2.0 - 1.0)
    feats = FeatureSet(rng.normal_array((n, module.context_dim)),
                       rng.normal_array((n, module.motion_dim)))
    gt = rng.normal_array((n, 3))
    nbrs = knn(cloud, cloud, module.k, include_self=module.include_self_neighbors)
    params = init_params(module, cfg.train.seed)
    decoder = init_decoder(module.motion_dim, cfg.train.seed)
    params.alpha.data = np.asarray(0.5 + 0.5 * rng.uniform())
    named = params.named_tensors() + decoder.named_tensors()

    with Tape() as tape:
        y_tilde, _ = forward(params, cloud, feats, nbrs, module)
        loss = loss_epe(decode_flow(decoder, y_tilde), gt)
    grads = backward(tape, loss)

    worst = 0.0
    for name, t in named:
        analytic = grads.wrt(t)
        if corrupt and name == "qk_proj":
            analytic = analytic + 0.5

        def run(values: np.ndarray, _t=t) -> float:
            saved = _t.data
            _t.data = values.reshape(saved.shape)
            try:
                y2, _ = forward(params, cloud, feats, nbrs, module)
                return float(loss_epe(decode_flow(decoder, y2), gt).data)
            finally:
                _t.data = saved

        try:
            numeric = finite_diff_grad(run, t.data).reshape(analytic.shape)
        except T.NumericalError as exc:
            raise T.NumericalError(f"{name}: {exc}") from exc
        rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
        worst = max(worst, float(rel.max()))
    return worst


def default_gradcheck_config() -> RunConfig:
    """The small instance used by the gradient check: N=12, 8-wide
    features, 3 neighbours."""
    cfg = RunConfig()
    cfg.module = AggregatorConfig(context_dim=8, motion_dim=8, k=3)
    return cfg


def run_occlusion_experiment(cfg: RunConfig,
                             scene: SyntheticScene | None = None) -> dict[str, ExperimentReport]:
    """Train the full module and the frozen-gate baseline on the same
    scene with identical initialization; report both.

    The baseline differs in exactly one way: the residual gate stays at
    zero, so corrected motion features equal the inputs and only the
    decoder learns. Any occluded-split advantage of "full" over
    "baseline" is attributable to the aggregation routes.
    """
    if scene is None:
        scene = generate_scene(cfg.scene)
    base = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, freeze_alpha=True))
    return {
        "full": train(cfg, scene=scene),
        "baseline": train(base, scene=scene),
    }


ABLATION_VARIANTS = ("full", "plain_aggregator", "no_local", "no_global", "backbone_only")


def _variant_config(cfg: RunConfig, variant: str) -> RunConfig:
    module = dataclasses.replace(cfg.module)
    ts = dataclasses.replace(cfg.train)
    if variant == "plain_aggregator":
        module.plain_aggregator = True
    elif variant == "no_local":
        module.disable_local = True
    elif variant == "no_global":
        module.disable_global = True
    elif variant == "backbone_only":
        ts.freeze_alpha = True
    elif variant != "full":
        raise ValueError(f"unknown ablation variant {variant!r}")
    return dataclasses.replace(cfg, module=module, train=ts)


def run_ablation(cfg: RunConfig,
                 scene: SyntheticScene | None = None) -> dict[str, ExperimentReport]:
    """Train five variants on one scene under identical seeds: the full
    module, the plain (un-normalized, ungated) aggregation head, each
    route disabled in turn, and the frozen-gate baseline.

    Core parameter initialization is shared bit-for-bit across variants;
    the plain head draws from a separate stream, so enabling it does not
    shift the rest."""
    if scene is None:
        scene = generate_scene(cfg.scene)
    return {v: train(_variant_config(cfg, v), scene=scene) for v in ABLATION_VARIANTS}


def ablation_table(reports: dict[str, ExperimentReport]) -> str:
    """key=value blocks per variant, occluded EPE first, stable order."""
    lines = []
    for variant in ABLATION_VARIANTS:
        r = reports[variant]
        lines.append(f"[{variant}]")
        if r.metrics_occluded is not None:
            lines.append(f"epe_occluded={r.metrics_occluded.epe_m!r}")
        lines.append(f"epe_all={r.metrics_all.epe_m!r}")
        if r.metrics_visible is not None:
            lines.append(f"epe_visible={r.metrics_visible.epe_m!r}")
        lines.append("")
    return "\n".join(lines)
