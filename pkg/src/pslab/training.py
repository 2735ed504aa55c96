"""Stage-weighted cosine loss, per-stage gradient masks, and the training loop.

The selective update strategy is realized as masks over parameter groups,
not graph detachment: every stage loss is backpropagated through the full
graph, and its contribution is kept only for the groups its schedule entry
names. The deep-stage loss therefore still reaches the shallow extractor
even when the shallow loss is switched off.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward
from .dataio import NormalMap
from .errors import ConfigError, NumericalError
from .evaluation import evaluate
from .network import STAGES, MsfConfig, MsfNet

EXTRACTOR_GROUPS = tuple(f"{s}_extractor" for s in STAGES)


@dataclass
class TrainConfig:
    stage_weights: tuple = (0.5, 0.5, 1.0)
    lr: float = 1e-3
    epochs: int = 20
    batch: int = 1
    seed: int = 0
    strategy: str = "selective"  # or "uniform"
    optimizer: str = "adam"  # or "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 10.0

    def __post_init__(self):
        self.stage_weights = tuple(float(w) for w in self.stage_weights)
        if len(self.stage_weights) != 3 or any(w < 0 for w in self.stage_weights):
            raise ConfigError("stage_weights must be three non-negative numbers")
        # lr = 0 is permitted so a zero-step run can be asserted in tests
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.strategy not in ("selective", "uniform"):
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


# ---------------------------------------------------------------------------
# losses


def cosine_loss(pred, gt: NormalMap) -> Tensor:
    """Mean over masked pixels of (1 - pred . gt).

    pred may be a NormalMap produced by the network (its autodiff tensor is
    used, so gradients flow) or a raw [3,H,W] Tensor.
    """
    if isinstance(pred, NormalMap):
        mask = pred.mask & gt.mask
        pt = pred.tensor if pred.tensor is not None else Tensor(pred.normals)
    else:
        mask = gt.mask
        pt = pred
    if not mask.any():
        raise ValueError("cosine_loss: empty shared mask")
    dot = ad.sum_channels(ad.mul(pt, Tensor(gt.normals)))
    residual = ad.mul(1.0 - dot, Tensor(mask.astype(np.float64)))
    return ad.scale(ad.sum_all(residual), 1.0 / float(mask.sum()))


def staged_loss(outputs: dict, gt: NormalMap, cfg: TrainConfig):
    """Weighted sum of the three stage losses; returns (total, per-stage dict)."""
    stage_losses = {stage: cosine_loss(outputs[stage].prediction, gt) for stage in STAGES}
    total = None
    for stage, w in zip(STAGES, cfg.stage_weights):
        term = ad.scale(stage_losses[stage], w)
        total = term if total is None else ad.add(total, term)
    return total, stage_losses


# ---------------------------------------------------------------------------
# freeze schedule


@dataclass
class FreezeSchedule:
    """Per stage loss: the parameter groups whose gradients it may touch."""

    touchable: dict

    def validate(self, group_names):
        names = set(group_names)
        for stage in STAGES:
            if stage not in self.touchable:
                raise ConfigError(f"FreezeSchedule: missing entry for stage {stage!r}")
            unknown = set(self.touchable[stage]) - names
            if unknown:
                raise ConfigError(f"FreezeSchedule[{stage}]: unknown groups {sorted(unknown)}")
        # the deep loss must be able to reach every extractor the other
        # stage losses reach (and its own)
        ext = lambda stage: {g for g in self.touchable[stage] if g in EXTRACTOR_GROUPS}
        if not (ext("deep") >= ext("middle") and ext("deep") >= ext("shallow")):
            raise ConfigError("FreezeSchedule: deep stage must cover the other stages' extractors")
        for stage in STAGES:
            own = f"{stage}_extractor"
            if own in names and own not in self.touchable[stage]:
                raise ConfigError(f"FreezeSchedule[{stage}] must include {own}")


def default_schedule(groups) -> FreezeSchedule:
    """The paper-style schedule over whatever groups the net actually has.

    shallow loss: its extractor + its head; middle loss: its extractor, the
    first fusion site, its head (the shallow extractor stays frozen); deep
    loss: everything.
    """
    names = set(groups)

    def head(stage):
        return {f"regression_{stage}"} if f"regression_{stage}" in names else {"regression"} & names

    touchable = {
        "shallow": ({"shallow_extractor"} | head("shallow")) & names,
        "middle": ({"middle_extractor", "fusion1"} | head("middle")) & names,
        "deep": frozenset(names),
    }
    schedule = FreezeSchedule({k: frozenset(v) for k, v in touchable.items()})
    schedule.validate(names)
    return schedule


# ---------------------------------------------------------------------------
# gradient accumulation


def trainable_tensors(groups):
    out = []
    for group in groups.values():
        if not group.frozen:
            out.extend(group.tensors)
    return out


def apply_selective_update(stage_losses: dict, groups: dict, schedule: FreezeSchedule, weights):
    """Accumulate sum_s w_s * mask_s(grad L_s) into every group tensor's .grad."""
    schedule.validate(groups.keys())
    acc = {}
    for group in groups.values():
        for t in group.tensors:
            acc[id(t)] = np.zeros_like(t.data)
    for stage, w in zip(STAGES, weights):
        if w == 0.0:
            continue
        for group in groups.values():
            group.zero_grads()
        backward(stage_losses[stage])
        for name, group in groups.items():
            if name not in schedule.touchable[stage]:
                continue
            for t in group.tensors:
                if t.grad is not None:
                    acc[id(t)] += w * t.grad
    for group in groups.values():
        for t in group.tensors:
            t.grad = acc[id(t)]


def clip_gradients(tensors, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float((t.grad**2).sum())
    norm = np.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for t in tensors:
            if t.grad is not None:
                t.grad = t.grad * factor
    return norm


# ---------------------------------------------------------------------------
# optimizers


class Adam:
    def __init__(self, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m, self.v = {}, {}
        self.t = 0

    def step(self, tensors):
        self.t += 1
        b1t = 1.0 - self.b1**self.t
        b2t = 1.0 - self.b2**self.t
        for t in tensors:
            if t.grad is None:
                continue
            key = id(t)
            m = self.m.setdefault(key, np.zeros_like(t.data))
            v = self.v.setdefault(key, np.zeros_like(t.data))
            m += (1.0 - self.b1) * (t.grad - m)
            v += (1.0 - self.b2) * (t.grad**2 - v)
            t.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


class Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, tensors):
        for t in tensors:
            if t.grad is not None:
                t.data -= self.lr * t.grad


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return Sgd(cfg.lr)


# ---------------------------------------------------------------------------
# training loop


LOG_HEADER = "epoch\tloss_shallow\tloss_middle\tloss_deep\tloss_total\tval_mae_shallow\tval_mae_middle\tval_mae_deep"


@dataclass
class EpochStats:
    epoch: int
    loss_shallow: float
    loss_middle: float
    loss_deep: float
    loss_total: float
    val_mae: dict  # stage -> mean MAE over the validation scenes

    def line(self) -> str:
        cols = [str(self.epoch)]
        cols += [repr(v) for v in (self.loss_shallow, self.loss_middle, self.loss_deep, self.loss_total)]
        cols += [repr(self.val_mae[s]) for s in STAGES]
        return "\t".join(cols)


@dataclass
class TrainResult:
    net: MsfNet
    history: list
    best_epoch: int
    best_val_mae: float

    def log_text(self) -> str:
        return "\n".join([LOG_HEADER] + [row.line() for row in self.history]) + "\n"


def validate_mae(net: MsfNet, dataset) -> dict:
    """Eval-mode MAE per stage, averaged over scenes. Shared by train and eval."""
    sums = {stage: 0.0 for stage in STAGES}
    for imageset, gt in dataset:
        outputs = net.forward(imageset, mode="eval")
        for stage in STAGES:
            sums[stage] += evaluate(outputs[stage].prediction, gt).mae_deg
    return {stage: sums[stage] / len(dataset) for stage in STAGES}


def train(
    dataset,
    cfg: TrainConfig,
    net: MsfNet | None = None,
    model_config: MsfConfig | None = None,
    val_dataset=None,
    verbose: bool = False,
) -> TrainResult:
    """Deterministic training loop; returns the best-by-validation model.

    dataset / val_dataset: lists of (ImageSet, NormalMap). When no
    validation set is given the training scenes double as one.
    """
    if not dataset:
        raise ValueError("train: empty dataset")
    if net is None:
        net = MsfNet(model_config or MsfConfig(seed=cfg.seed))
    val = val_dataset if val_dataset else dataset
    schedule = default_schedule(net.groups)
    optimizer = make_optimizer(cfg)
    rng = np.random.default_rng(cfg.seed)
    tensors = trainable_tensors(net.groups)

    history = []
    best_epoch, best_val, best_snap = -1, np.inf, net.snapshot()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        sums = {stage: 0.0 for stage in STAGES}
        n_steps = 0
        for start in range(0, len(order), cfg.batch):
            batch = [dataset[i] for i in order[start : start + cfg.batch]]
            scene_losses = []
            for imageset, gt in batch:
                outputs = net.forward(imageset, mode="train")
                _, stage_losses = staged_loss(outputs, gt, cfg)
                scene_losses.append(stage_losses)
            merged = _mean_stage_losses(scene_losses)
            for stage in STAGES:
                val_s = float(merged[stage].data)
                if not np.isfinite(val_s):
                    raise NumericalError(
                        f"train: non-finite {stage} loss at epoch {epoch}, step {n_steps}"
                    )
                sums[stage] += val_s
            if cfg.strategy == "selective":
                apply_selective_update(merged, net.groups, schedule, cfg.stage_weights)
            else:
                total = None
                for stage, w in zip(STAGES, cfg.stage_weights):
                    term = ad.scale(merged[stage], w)
                    total = term if total is None else ad.add(total, term)
                for group in net.groups.values():
                    group.zero_grads()
                backward(total)
            clip_gradients(tensors, cfg.clip_norm)
            optimizer.step(tensors)
            n_steps += 1

        means = {stage: sums[stage] / n_steps for stage in STAGES}
        total_mean = sum(w * means[s] for s, w in zip(STAGES, cfg.stage_weights))
        vmae = validate_mae(net, val)
        stats = EpochStats(
            epoch=epoch,
            loss_shallow=means["shallow"],
            loss_middle=means["middle"],
            loss_deep=means["deep"],
            loss_total=total_mean,
            val_mae=vmae,
        )
        history.append(stats)
        if verbose:
            print(stats.line(), flush=True)
        if vmae["deep"] < best_val:
            best_val = vmae["deep"]
            best_epoch = epoch
            best_snap = net.snapshot()

    net.load_snapshot(best_snap)
    return TrainResult(net=net, history=history, best_epoch=best_epoch, best_val_mae=best_val)


def _mean_stage_losses(scene_losses: list) -> dict:
    if len(scene_losses) == 1:
        return scene_losses[0]
    inv = 1.0 / len(scene_losses)
    merged = {}
    for stage in STAGES:
        total = None
        for losses in scene_losses:
            total = losses[stage] if total is None else ad.add(total, losses[stage])
        merged[stage] = ad.scale(total, inv)
    return merged
