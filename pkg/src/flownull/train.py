"""Two-stage training: MSE pretraining of the conditioning trunk, then joint NLL.

Both stages are deterministic given ``TrainConfig.seed``: the batch order of
epoch ``e`` is drawn from ``default_rng([seed, e])``, so a run resumed from its
``last`` checkpoint continues exactly where an uninterrupted run would be.
"""

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from flownull.core import io as fnt
from flownull.core import tensor as T
from flownull.core.optim import Adam
from flownull.core.tensor import PoisonedGradientError, Tape, Tensor
from flownull.flow.model import ConditionalFlow

log = logging.getLogger(__name__)

LN2 = float(np.log(2.0))
CSV_FIELDS = ["epoch", "train_bpd", "val_bpd", "wall_time"]


class TrainingDiverged(RuntimeError):
    def __init__(self, report):
        self.report = report
        super().__init__(f"training diverged: {report}")


@dataclass
class TrainConfig:
    pretrain_epochs: int = 10
    joint_epochs: int = 30
    batch_size: int = 8
    pretrain_lr: float = 3e-3
    joint_lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    val_fraction: float = 0.1
    target_noise: float = 0.0  # std of Gaussian jitter added to targets during training
    nullspace_learning: bool = True
    data_consistency: bool = True
    skip_pretrain: bool = False
    preset: str = "desk"
    init_batch: int = 64

    def __post_init__(self):
        if self.batch_size <= 0 or self.pretrain_lr <= 0 or self.joint_lr <= 0:
            raise ValueError("batch size and learning rates must be positive")
        if self.pretrain_epochs < 0 or self.joint_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.target_noise < 0:
            raise ValueError("target_noise must be >= 0")

    @classmethod
    def from_run(cls, run):
        t, a = run.train, run.ablation
        return cls(pretrain_epochs=t.pretrain_epochs, joint_epochs=t.joint_epochs,
                   batch_size=t.batch_size, pretrain_lr=t.pretrain_lr, joint_lr=t.joint_lr,
                   beta1=t.beta1, beta2=t.beta2, seed=t.seed, val_fraction=t.val_fraction,
                   target_noise=t.target_noise, nullspace_learning=a.nullspace_learning,
                   data_consistency=a.data_consistency, skip_pretrain=a.skip_pretrain,
                   preset=run.preset)


def epoch_batches(n, batch_size, seed, epoch):
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _split(data, cfg, val):
    if val is not None:
        return data, val
    if cfg.val_fraction > 0 and len(data) > 1:
        return data.split(cfg.val_fraction, cfg.seed)
    return data, None


# -- stage 1 ------------------------------------------------------------------

def mse_loss(model, y, target):
    out = model.condnet.pretrain_output(Tensor(np.asarray(y, model.dtype)))
    return T.mean(T.square(out - Tensor(np.asarray(target, model.dtype))))


def _eval_mse(model, y, target, batch=32):
    total = 0.0
    for i in range(0, len(y), batch):
        total += float(mse_loss(model, y[i:i + batch], target[i:i + batch]).data) * len(y[i:i + batch])
    return total / len(y)


def pretrain_condnet(model, data, cfg, val=None):
    """Fit the trunk (plus a temporary 1x1 head) to the targets by MSE, then drop the head.

    Returns a history dict with per-epoch train/val MSE.
    """
    data, val = _split(data, cfg, val)
    targets = data.targets(cfg.nullspace_learning)
    ys = data.channels("y")
    val_t = val.targets(cfg.nullspace_learning) if val is not None else targets
    val_y = val.channels("y") if val is not None else ys

    model.condnet.attach_head(np.random.default_rng([cfg.seed, 7]))
    model.astype(model.dtype)
    params = model.condnet.parameters() + [p for _, p in model.condnet.head_parameters()]
    opt = Adam(params, lr=cfg.pretrain_lr, beta1=cfg.beta1, beta2=cfg.beta2)

    history = {"train_mse": [], "val_mse": [], "initial_val_mse": _eval_mse(model, val_y, val_t)}
    for epoch in range(cfg.pretrain_epochs):
        losses = []
        for idx in epoch_batches(len(data), cfg.batch_size, cfg.seed, epoch):
            with Tape() as tape:
                loss = mse_loss(model, ys[idx], targets[idx])
            if not np.isfinite(loss.data):
                model.condnet.drop_head()
                raise TrainingDiverged({"stage": "pretrain", "epoch": epoch, "loss": float(loss.data)})
            opt.step(tape.backward(loss, params))
            losses.append(float(loss.data))
        history["train_mse"].append(float(np.mean(losses)))
        history["val_mse"].append(_eval_mse(model, val_y, val_t))
        log.info("pretrain epoch %d: train mse %.5f, val mse %.5f", epoch,
                 history["train_mse"][-1], history["val_mse"][-1])
    history["final_val_mse"] = history["val_mse"][-1] if history["val_mse"] else history["initial_val_mse"]
    model.condnet.drop_head()
    return history


# -- stage 2 ------------------------------------------------------------------

def nll_loss(model, u, y, target_noise=0.0, rng=None):
    """Mean negative log-likelihood (nats) of targets ``u`` given ``y``.

    Returns ``(loss_tensor, bits_per_dim)``.
    """
    u = np.asarray(u, model.dtype)
    if target_noise > 0:
        rng = rng if rng is not None else np.random.default_rng()
        u = u + (target_noise * rng.standard_normal(u.shape)).astype(u.dtype)
    _, logp = model.log_prob(u, np.asarray(y, model.dtype))
    loss = T.mean(-logp)
    if not np.isfinite(loss.data):
        raise PoisonedGradientError("nll_loss", "non-finite negative log-likelihood")
    return loss, float(loss.data) / (model.latent_dim * LN2)


def evaluate_bpd(model, u, y, batch=32):
    """Mean bits/dim over a set, no tape."""
    total = 0.0
    for i in range(0, len(u), batch):
        _, bpd = nll_loss(model, u[i:i + batch], y[i:i + batch])
        total += bpd * len(u[i:i + batch])
    return total / len(u)


def _save_state(model, opt, directory, state):
    directory = Path(directory)
    model.save(directory, extra={"train_state": state})
    odir = directory / "optim"
    odir.mkdir(exist_ok=True)
    st = opt.state_arrays()
    t, m, v = st["t"], st["m"], st["v"]
    for i, (mi, vi) in enumerate(zip(m, v)):
        fnt.save(odir / f"m_{i:04d}.fnt", mi)
        fnt.save(odir / f"v_{i:04d}.fnt", vi)
    (odir / "state.json").write_text(json.dumps({"t": t, "n": len(m)}) + "\n")


def _load_optim(opt, directory):
    odir = Path(directory) / "optim"
    meta = json.loads((odir / "state.json").read_text())
    m = [fnt.load(odir / f"m_{i:04d}.fnt") for i in range(meta["n"])]
    v = [fnt.load(odir / f"v_{i:04d}.fnt") for i in range(meta["n"])]
    opt.load_state_arrays(meta["t"], m, v)


def train_joint(model, data, cfg, out_dir=None, val=None, resume=False):
    """Jointly train conditioning net and flow by NLL.

    Writes ``best/`` (lowest validation bits/dim), ``last/`` (with optimiser
    state, used by ``resume``) and ``train_log.csv`` under ``out_dir``. On a
    non-finite loss the pre-step weights go to ``last_good/`` and
    :class:`TrainingDiverged` is raised. The model is left holding the best
    weights.
    """
    data, val = _split(data, cfg, val)
    targets = data.targets(cfg.nullspace_learning)
    ys = data.channels("y")
    if val is not None:
        val_t, val_y = val.targets(cfg.nullspace_learning), val.channels("y")
    else:
        val_t, val_y = targets, ys
    out_dir = Path(out_dir) if out_dir is not None else None

    params = model.parameters()
    opt = Adam(params, lr=cfg.joint_lr, beta1=cfg.beta1, beta2=cfg.beta2)
    start_epoch, best_val, best_epoch = 0, np.inf, -1
    if resume:
        if out_dir is None or not (out_dir / "last" / "manifest.json").exists():
            raise FileNotFoundError("nothing to resume from: no last/ checkpoint")
        loaded, manifest = ConditionalFlow.load(out_dir / "last")
        model.load_state_dict(loaded.state_dict())
        for a, b in zip(_actnorms(model), _actnorms(loaded)):
            a.initialized = b.initialized
        _load_optim(opt, out_dir / "last")
        st = manifest["train_state"]
        start_epoch, best_val, best_epoch = st["epoch"] + 1, st["best_val_bpd"], st["best_epoch"]
    elif not model.initialized:
        finite = np.flatnonzero(np.all(np.isfinite(targets), axis=(1, 2, 3)))
        if len(finite) == 0:
            raise ValueError("no finite training targets")
        idx = np.random.default_rng([cfg.seed, 99991]).permutation(finite)[:max(cfg.init_batch, 1)]
        model.initialize(targets[idx], ys[idx])

    best_state = {k: v.copy() for k, v in model.state_dict().items()}
    if resume and out_dir is not None and (out_dir / "best" / "manifest.json").exists():
        best_state = ConditionalFlow.load(out_dir / "best")[0].state_dict()

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "train_log.csv"
        if not resume or not csv_path.exists():
            with open(csv_path, "w", newline="") as f:
                csv.writer(f).writerow(CSV_FIELDS)

    history = {"epochs": [], "step_losses": []}
    t0 = time.perf_counter()
    for epoch in range(start_epoch, cfg.joint_epochs):
        jitter = np.random.default_rng([cfg.seed, epoch, 1])
        bpds = []
        for step, idx in enumerate(epoch_batches(len(data), cfg.batch_size, cfg.seed, epoch)):
            try:
                with Tape() as tape:
                    loss, bpd = nll_loss(model, targets[idx], ys[idx], cfg.target_noise, jitter)
                grads = tape.backward(loss, params)
            except PoisonedGradientError as err:
                report = {"stage": "joint", "epoch": epoch, "step": step, "op": err.op}
                if out_dir is not None:
                    model.save(out_dir / "last_good", extra={"divergence": report})
                    (out_dir / "divergence.json").write_text(json.dumps(report, indent=2) + "\n")
                if best_epoch >= 0:
                    model.load_state_dict(best_state)
                raise TrainingDiverged(report) from err
            opt.step(grads)
            bpds.append(bpd)
            history["step_losses"].append(float(loss.data))
        val_bpd = evaluate_bpd(model, val_t, val_y)
        row = {"epoch": epoch, "train_bpd": float(np.mean(bpds)), "val_bpd": val_bpd,
               "wall_time": time.perf_counter() - t0}
        history["epochs"].append(row)
        log.info("joint epoch %d: train %.4f bpd, val %.4f bpd", epoch, row["train_bpd"], val_bpd)
        if val_bpd < best_val:
            best_val, best_epoch = val_bpd, epoch
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
            if out_dir is not None:
                model.save(out_dir / "best", extra={"train_state": {"epoch": epoch, "val_bpd": val_bpd}})
        if out_dir is not None:
            with open(out_dir / "train_log.csv", "a", newline="") as f:
                csv.writer(f).writerow([row[k] for k in CSV_FIELDS])
            _save_state(model, opt, out_dir / "last",
                        {"epoch": epoch, "best_val_bpd": best_val, "best_epoch": best_epoch,
                         "config": asdict(cfg)})

    if best_epoch >= 0:
        model.load_state_dict(best_state)
    history["best_val_bpd"] = float(best_val)
    history["best_epoch"] = best_epoch
    return history


def train(model, data, cfg, out_dir=None, val=None):
    """Both stages in sequence; returns ``{"pretrain": ..., "joint": ...}``."""
    data, val = _split(data, cfg, val)
    hist = {"pretrain": None}
    if not cfg.skip_pretrain and cfg.pretrain_epochs > 0:
        hist["pretrain"] = pretrain_condnet(model, data, cfg, val=val)
    hist["joint"] = train_joint(model, data, cfg, out_dir=out_dir, val=val)
    return hist


def _actnorms(model):
    from flownull.flow.layers import ActNorm

    return [layer for level in model.flow.levels for layer in level.layers if isinstance(layer, ActNorm)]
