"""RMSprop training loop with piecewise-constant learning-rate decay."""
import csv
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from . import data as D
from . import model as M
from .loss import LossWeights, total_loss
from .numerics import engine as E

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "lr", "loss_total", "loss_reg", "loss_cls", "loss_sim", "loss_dis", "val_ji")
PAPER_MILESTONES = ((250, 1e-4), (700, 5e-5), (850, 1e-5))


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch, batch, what="loss"):
        super().__init__(f"non-finite {what} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    milestones: Tuple[Tuple[int, float], ...] = ((120, 1e-4), (170, 5e-5), (190, 1e-5))
    rho: float = 0.9
    momentum: float = 0.0
    epsilon: float = 1e-7
    weights: LossWeights = field(default_factory=LossWeights)
    squared_regression: bool = False
    seed: int = 0
    data: Optional[str] = None
    val_data: Optional[str] = None
    model: M.ModelConfig = field(default_factory=M.ModelConfig)
    eval_every: int = 10

    def __post_init__(self):
        self.milestones = tuple((int(e), float(lr)) for e, lr in self.milestones)
        epochs = [e for e, _ in self.milestones]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError(f"milestones must be strictly increasing in epoch: {epochs}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self):
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["model"] = M.ModelConfig.from_dict(d["model"])
        d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


def desk_profile(**overrides):
    return replace(TrainConfig(), **overrides)


def paper_profile(**overrides):
    cfg = TrainConfig(epochs=1000, batch_size=128, lr=1e-3, milestones=PAPER_MILESTONES,
                      model=M.paper_config())
    return replace(cfg, **overrides)


PROFILES = {"desk": desk_profile, "paper": paper_profile}


def with_epochs(cfg, epochs):
    """``cfg`` shortened or stretched to ``epochs``, decay milestones kept at the same fractions."""
    scale = epochs / cfg.epochs
    ms = [(max(1, int(round(e * scale))), lr) for e, lr in cfg.milestones]
    ms = [m for k, m in enumerate(ms) if k == 0 or m[0] > ms[k - 1][0]]
    return replace(cfg, epochs=epochs, milestones=tuple(ms))


# ---------------------------------------------------------------- schedule & optimizer

def lr_schedule(cfg, epoch):
    """Learning rate of the last milestone reached by ``epoch``, else the initial rate."""
    lr = cfg.lr
    for start, value in cfg.milestones:
        if epoch >= start:
            lr = value
    return lr


def init_optimizer(params):
    return {name: np.zeros_like(np.asarray(p)) for name, p in params.items()}


def rmsprop_step(params, grads, state, lr, rho=0.9, eps=1e-7, momentum=0.0, buffers=None):
    """In-place RMSprop update of numpy ``params`` from ``grads``.

    v <- rho*v + (1-rho)*g^2 ; theta <- theta - lr*g/(sqrt(v)+eps).
    With ``momentum > 0`` the step goes through a velocity buffer held in ``buffers``.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape or state[name].shape != p.shape:
            raise ValueError(f"shape mismatch for {name!r}: param {p.shape}, grad {g.shape}, "
                             f"state {state[name].shape}")
        v = state[name]
        v *= rho
        v += (1 - rho) * g * g
        step = lr * g / (np.sqrt(v) + eps)
        if momentum:
            buf = buffers.setdefault(name, np.zeros_like(p))
            buf *= momentum
            buf += step
            step = buf
        p -= step.astype(p.dtype, copy=False)
    return params, state


def epoch_permutation(seed, epoch, n):
    """Sample order for one epoch: Philox keyed by the seed, counter set by the epoch."""
    bitgen = np.random.Philox(key=int(seed) & (2**64 - 1), counter=[0, 0, int(epoch), 0])
    return np.random.Generator(bitgen).permutation(n)


# ---------------------------------------------------------------- steps

def to_float_images(pixels):
    return pixels.astype(np.float32) / np.float32(255.0)


def loss_and_grads(mcfg, params, pixels, rings, classes, weights, squared=False):
    """Forward + backward on one batch. ``params`` are Tensors; grads land in ``.grad``."""
    for p in params.values():
        p.grad = None
    out = M.apply(mcfg, params, E.Tensor(to_float_images(pixels)))
    breakdown = total_loss(out, rings, classes, weights, squared)
    E.backward(breakdown.total)
    return breakdown


@dataclass
class TrainState:
    tensors: dict
    opt: dict
    epoch: int = 0          # next epoch to run
    buffers: dict = field(default_factory=dict)


def save_state(path, state, tcfg, metrics=()):
    tensors = dict(state.tensors)
    tensors.update({f"opt.v.{k}": v for k, v in state.opt.items()})
    tensors.update({f"opt.m.{k}": v for k, v in state.buffers.items()})
    meta = {"train_state": {"epoch": state.epoch}, "train_config": tcfg.to_dict(),
            "metrics": list(metrics)}
    M.save_checkpoint(M.Checkpoint(tcfg.model, tensors, meta=meta), path)


def load_state(path):
    ck = M.load_checkpoint(path)
    names = M.parameter_shapes(ck.config)
    tensors = {k: ck.tensors[k] for k in names}
    opt = {k[len("opt.v."):]: v for k, v in ck.tensors.items() if k.startswith("opt.v.")}
    buffers = {k[len("opt.m."):]: v for k, v in ck.tensors.items() if k.startswith("opt.m.")}
    if set(opt) != set(names):
        raise M.CheckpointError(f"{path}: not a training state (optimizer accumulators missing)")
    tcfg = TrainConfig.from_dict(ck.meta["train_config"])
    return TrainState(tensors, opt, int(ck.meta["train_state"]["epoch"]), buffers), tcfg, ck.meta.get("metrics", [])


def _load_split(source, n_points):
    if source is None:
        return None, None
    samples = D.load_dataset(source) if isinstance(source, (str, os.PathLike)) else list(source)
    return samples, D.training_arrays(samples, n_points)


def train(cfg, train_samples=None, val_samples=None, out_dir=None, resume=None,
          stop_after_epochs=None, progress=None):
    """Train a model. Returns ``(checkpoint, metrics rows)``.

    ``train_samples``/``val_samples`` are lists of SceneSamples or dataset
    directories (falling back to ``cfg.data``/``cfg.val_data``). With
    ``out_dir``, writes ``model.ckpt``, ``state.ckpt`` (resumable) and
    ``metrics.csv`` at the end, plus ``model_epochNNNN.ckpt`` just before
    every learning-rate milestone. ``resume`` continues from a saved state file.
    ``stop_after_epochs`` ends the run early (the state is still saved), for
    interrupted-run tests.
    """
    from .evaluate import evaluate  # evaluate imports train-free modules only

    if resume is not None:
        state, saved_cfg, metrics = load_state(resume)
        cfg = replace(saved_cfg, data=cfg.data, val_data=cfg.val_data)
    else:
        state = None
        metrics = []
    mcfg = cfg.model
    _, train_arrays = _load_split(train_samples if train_samples is not None else cfg.data, mcfg.n_points)
    if train_arrays is None:
        raise ValueError("no training data given")
    val_list, _ = _load_split(val_samples if val_samples is not None else cfg.val_data, mcfg.n_points)
    images, rings, classes = train_arrays
    if images.shape[1:3] != (mcfg.input_hw, mcfg.input_hw):
        raise ValueError(f"training images are {images.shape[1:3]}, model expects {mcfg.input_hw}")

    if state is None:
        ck = M.build_model(mcfg, cfg.seed)
        state = TrainState(dict(ck.tensors), init_optimizer(ck.tensors))
    params = {k: E.Tensor(v, requires_grad=True, name=k) for k, v in state.tensors.items()}
    arrays = {k: p.data for k, p in params.items()}

    n = images.shape[0]
    milestone_epochs = {e for e, _ in cfg.milestones}
    end_epoch = cfg.epochs if stop_after_epochs is None else min(cfg.epochs, state.epoch + stop_after_epochs)
    for epoch in range(state.epoch, end_epoch):
        t0 = time.perf_counter()
        lr = lr_schedule(cfg, epoch)
        order = epoch_permutation(cfg.seed, epoch, n)
        sums = dict.fromkeys(("total", "reg", "cls", "sim", "dis"), 0.0)
        batches = 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = np.sort(order[start:start + cfg.batch_size])
            bd = loss_and_grads(mcfg, params, images[idx], rings[idx], classes[idx],
                                cfg.weights, cfg.squared_regression)
            vals = bd.as_floats()
            if not np.isfinite(vals["total"]):
                raise TrainingDivergedError(epoch, b)
            grads = {k: p.grad for k, p in params.items()}
            if not all(np.all(np.isfinite(g)) for g in grads.values() if g is not None):
                raise TrainingDivergedError(epoch, b, "gradient")
            rmsprop_step(arrays, grads, state.opt, lr, cfg.rho, cfg.epsilon, cfg.momentum, state.buffers)
            for k in sums:
                sums[k] += vals[k]
            batches += 1
        state.epoch = epoch + 1
        row = {"epoch": epoch, "lr": lr}
        row.update({f"loss_{k}": v / max(batches, 1) for k, v in sums.items()})
        row["val_ji"] = ""
        last = epoch + 1 == cfg.epochs
        if val_list and cfg.eval_every and ((epoch + 1) % cfg.eval_every == 0 or last):
            ck = M.Checkpoint(mcfg, {k: v.copy() for k, v in arrays.items()})
            row["val_ji"] = evaluate(ck, val_list).overall
        metrics.append(row)
        log.info("epoch %d lr %.2g loss %.5f reg %.5f val_ji %s (%.1fs)", epoch, lr, row["loss_total"],
                 row["loss_reg"], row["val_ji"], time.perf_counter() - t0)
        if progress is not None:
            progress(row)
        if out_dir is not None and state.epoch in milestone_epochs:
            os.makedirs(out_dir, exist_ok=True)
            M.save_checkpoint(M.Checkpoint(mcfg, {k: v.copy() for k, v in arrays.items()},
                                           meta={"seed": cfg.seed, "epochs_trained": state.epoch}),
                              os.path.join(out_dir, f"model_epoch{state.epoch:04d}.ckpt"))

    state.tensors = arrays
    ckpt = M.Checkpoint(mcfg, {k: v.copy() for k, v in arrays.items()},
                        meta={"seed": cfg.seed, "epochs_trained": state.epoch})
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        M.save_checkpoint(ckpt, os.path.join(out_dir, "model.ckpt"))
        save_state(os.path.join(out_dir, "state.ckpt"), state, cfg, metrics)
        write_metrics(os.path.join(out_dir, "metrics.csv"), metrics)
    return ckpt, metrics


def write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: row.get(k, "") for k in METRIC_FIELDS})
