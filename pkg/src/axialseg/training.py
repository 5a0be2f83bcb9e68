"""Loss, Adam, the training loop and finite-difference gradient checking."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .metrics import MetricsReport, dataset_report
from .tensor import Graph, NonFiniteError, Parameter, Tensor

log = logging.getLogger(__name__)

PRED_CLAMP = 1e-7
DICE_SMOOTH = 1.0


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch_size: int = 8
    learning_rate: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    loss_mix: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.loss_mix <= 1.0:
            raise ValueError(f"loss_mix must be in [0, 1], got {self.loss_mix}")


# ---------------------------------------------------------------------------
# loss


def bce_dice_loss(pred, target, mix: float = 0.5) -> Tensor:
    """``mix * BCE + (1 - mix) * (1 - (2 sum(p t) + 1) / (sum p + sum t + 1))``.

    BCE uses predictions clamped to ``[1e-7, 1 - 1e-7]``; Dice uses them raw.
    """
    pred = T.tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    if not np.all((pred.data >= 0.0) & (pred.data <= 1.0)):
        raise ValueError("predictions must lie in [0, 1]")
    n = pred.size
    p = T.clip(pred, PRED_CLAMP, 1.0 - PRED_CLAMP)
    bce = T.scalar_mul(
        T.sum(T.add(T.mul(target, T.log(p)), T.mul(1.0 - target, T.log(T.sub(1.0, p))))),
        -1.0 / n,
    )
    inter = T.sum(T.mul(pred, target))
    denom = T.add(T.sum(pred), float(target.sum()) + DICE_SMOOTH)
    ratio = T.div(T.add(T.scalar_mul(inter, 2.0), DICE_SMOOTH), denom)
    dice = T.sub(1.0, ratio)
    return T.add(T.scalar_mul(bce, mix), T.scalar_mul(dice, 1.0 - mix))


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction. Parameters are replaced, never mutated in place."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ValueError(f"expected {len(self.params)} gradients, got {len(grads)}")
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            g = np.asarray(g, dtype=np.float64)
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {p.name!r} {p.shape}")
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainLog:
    steps: list[tuple[int, float, float]] = field(default_factory=list)
    validation: list[tuple[int, int, MetricsReport]] = field(default_factory=list)  # (epoch, step, report)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss", "grad_norm"])
            for step, loss, gn in self.steps:
                w.writerow([step, repr(loss), repr(gn)])

    def write_validation_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("epoch," + MetricsReport.CSV_HEADER + "\n")
            for epoch, _, rep in self.validation:
                fh.write(f"{epoch},{rep.csv_row()}\n")


def batch_loss(model, batch, mix: float) -> Tensor:
    losses = [bce_dice_loss(model.forward(s.image[None]), s.mask[None], mix) for s in batch]
    total = losses[0]
    for item in losses[1:]:
        total = T.add(total, item)
    return T.scalar_mul(total, 1.0 / len(losses))


def train(model, dataset, config: TrainConfig, val=None, eval_every: int = 1):
    """Optimize ``model`` in place; returns ``(model, TrainLog)``.

    Each epoch is a fresh seeded permutation of ``dataset`` cut into
    consecutive batches (the last one may be short). When ``val`` is given it
    is scored every ``eval_every`` epochs and after the final step.
    """
    dataset = list(dataset)
    if not dataset:
        raise TrainingError("training dataset is empty")
    rng = np.random.default_rng(config.seed)
    params = [p for p in model.parameters() if not p.frozen]
    opt = Adam(params, config.learning_rate, config.betas, config.eps)
    log_ = TrainLog()
    order: list[int] = []
    epoch = 0
    for step in range(1, config.steps + 1):
        if not order:
            order = list(rng.permutation(len(dataset)))
        batch = [dataset[i] for i in order[: config.batch_size]]
        order = order[config.batch_size :]
        try:
            with Graph() as g:
                loss = batch_loss(model, batch, config.loss_mix)
                grads = g.backward(loss)
        except NonFiniteError as exc:
            raise TrainingError(f"non-finite value at step {step}: {exc}") from exc
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss at step {step}")
        gs = [grads[p] for p in params]
        grad_norm = float(np.sqrt(sum(float((gi * gi).sum()) for gi in gs)))
        opt.step(gs)
        log_.steps.append((step, value, grad_norm))
        if step % 50 == 0 or step == 1:
            log.info("step %d loss %.5f grad_norm %.4f", step, value, grad_norm)
        end_of_epoch = not order
        if end_of_epoch:
            epoch += 1
        if val and ((end_of_epoch and epoch % eval_every == 0) or step == config.steps):
            log_.validation.append((epoch, step, dataset_report(val, model)))
    return model, log_


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradcheckReport:
    max_rel_error: float
    worst_param: str
    per_param: dict[str, float]
    coords_checked: int

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def gradcheck(
    fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-5,
    max_coords: int | None = 64,
    seed: int = 0,
    loss_weights: np.ndarray | None = None,
    full_check: Callable[[Parameter], bool] | None = None,
) -> GradcheckReport:
    """Compare backward gradients with central differences.

    The scalar loss is ``sum(fn())``, or ``sum(fn() * loss_weights)`` when
    weights are given. Parameters with more than ``max_coords`` entries are
    sampled unless ``full_check(p)`` says otherwise; frozen parameters are
    skipped.
    """
    rng = np.random.default_rng(seed)

    def loss_value(out: Tensor) -> Tensor:
        return T.sum(out if loss_weights is None else T.mul(out, loss_weights))

    live = [p for p in params if not p.frozen]
    with Graph() as g:
        grads = g.backward(loss_value(fn()))
    analytic = {id(p): grads[p] for p in live}

    per_param: dict[str, float] = {}
    checked = 0
    for p in live:
        flat_count = p.size
        coords = np.arange(flat_count)
        if max_coords is not None and flat_count > max_coords and not (full_check and full_check(p)):
            coords = np.sort(rng.choice(flat_count, size=max_coords, replace=False))
        worst = 0.0
        original = p.data
        for c in coords:
            idx = np.unravel_index(c, p.shape) if p.shape else ()
            vals = []
            for sign in (1.0, -1.0):
                bumped = original.copy()
                bumped[idx] = original[idx] + sign * eps
                p.data = bumped
                vals.append(loss_value(fn()).item())
            p.data = original
            numeric = (vals[0] - vals[1]) / (2 * eps)
            worst = max(worst, relative_error(float(analytic[id(p)][idx]), numeric))
            checked += 1
        per_param[p.name] = worst
    name = max(per_param, key=per_param.get) if per_param else ""
    return GradcheckReport(per_param.get(name, 0.0), name, per_param, checked)


GRADCHECK_VARIANTS = ("full2d", "relpos2d", "axial", "gated")


def attention_gradcheck(
    variant: str,
    channels: int = 4,
    height: int = 4,
    width: int = 6,
    heads: int = 2,
    eps: float = 1e-5,
    seed: int = 0,
) -> GradcheckReport:
    """Gradcheck one attention variant on a random ``[channels, height, width]`` input.

    Every coordinate of the input, projections, relative tables and gates is
    checked. Axial variants run a height layer followed by a width layer.
    """
    from .attention import (
        AxialAttentionLayer,
        Axis,
        Full2DAttentionLayer,
        full_attention_2d,
        full_attention_2d_relpos,
    )

    if variant not in GRADCHECK_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; valid: {', '.join(GRADCHECK_VARIANTS)}")
    rng = np.random.default_rng(seed)
    x = Parameter(rng.standard_normal((channels, height, width)), "input")
    if variant in ("full2d", "relpos2d"):
        layer = Full2DAttentionLayer.init(channels, heads, height, width, rng, relpos=variant == "relpos2d")
        op = full_attention_2d if variant == "full2d" else full_attention_2d_relpos
        params = [x, *layer.parameters()]

        def fn():
            return op(x, layer)

    else:
        gated = variant == "gated"
        h_layer = AxialAttentionLayer.init(Axis.HEIGHT, channels, heads, height, rng, gated=gated, prefix="height.")
        w_layer = AxialAttentionLayer.init(Axis.WIDTH, channels, heads, width, rng, gated=gated, prefix="width.")
        if gated:
            # move gates off 1.0 so their gradients are generic
            for gate in h_layer.gates.parameters() + w_layer.gates.parameters():
                gate.data = np.array(rng.uniform(0.5, 1.5))
        params = [x, *h_layer.parameters(), *w_layer.parameters()]

        def fn():
            return w_layer(h_layer(x))

    return gradcheck(fn, params, eps=eps, max_coords=None, seed=seed)
