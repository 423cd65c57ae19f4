"""Mini-batch training for FM/NFM with Adam or plain SGD.

Adam follows the standard bias-corrected moment recursion with dense
updates. The plain-SGD path skips shuffling and momentum entirely so a
single step is exactly

    w_j <- w_j + lr * (y - sigmoid(logit)) * x_j

(for l2 = 0), which keeps the update law directly checkable.

Early stopping watches per-user AUC on the validation split and restores
the best snapshot. The optional "unaware" ablation pins the bias field to
zero influence: its linear weights and embedding rows start at zero and
their gradients are dropped every step, so those features never touch the
model's output.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ConfigError, DivergenceError
from .evaluation import user_auc
from .models import ModelParams, init_params, loss_and_grads, predict
from .numeric import sigmoid, to_jsonable

ABLATIONS = ("none", "unaware")
OPTIMIZERS = ("adam", "plain_sgd")


@dataclass(frozen=True)
class TrainConfig:
    arch: str = "fm"
    embedding_dim: int = 16
    hidden: int = 64
    lr: float = 1e-3
    batch_size: int = 256
    l2: float = 1e-6
    dropout_interaction: float = 0.0
    dropout_hidden: float = 0.0
    max_epochs: int = 20
    patience: int = 3
    optimizer: str = "adam"
    ablation: str = "none"
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ("fm", "nfm"):
            raise ConfigError(f"unknown architecture {self.arch!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}")
        if self.embedding_dim < 1 or self.hidden < 1:
            raise ConfigError("embedding_dim and hidden must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.l2 < 0:
            raise ConfigError("l2 must be >= 0")
        for name in ("dropout_interaction", "dropout_hidden"):
            p = getattr(self, name)
            if not (0.0 <= p < 1.0):
                raise ConfigError(f"{name} must be in [0, 1)")
        if self.max_epochs < 1 or self.patience < 0:
            raise ConfigError("max_epochs must be >= 1 and patience >= 0")


@dataclass
class TrainReport:
    """Per-epoch history and the stopping decision.

    wall_seconds is informational only and deliberately left out of the
    JSON form so that reruns of the same seed serialize identically.
    """

    arch: str
    optimizer: str
    ablation: str
    seed: int
    n_train: int
    n_val: int
    epochs_run: int
    best_epoch: int
    train_loss: list[float] = field(default_factory=list)
    val_uauc: list[float] = field(default_factory=list)
    best_val_uauc: float = float("nan")
    stopped_early: bool = False
    wall_seconds: float = 0.0

    def to_json_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "wall_seconds"}
        return to_jsonable(d)


class Adam:
    """Dense Adam with bias correction; one shared step counter for all keys."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, grads: dict) -> dict:
        """Deltas to subtract from each parameter, given this step's grads."""
        self.t += 1
        out = {}
        for key, g in grads.items():
            m = self.beta1 * self.m.get(key, 0.0) + (1.0 - self.beta1) * g
            v = self.beta2 * self.v.get(key, 0.0) + (1.0 - self.beta2) * (g * g)
            self.m[key] = m
            self.v[key] = v
            m_hat = m / (1.0 - self.beta1 ** self.t)
            v_hat = v / (1.0 - self.beta2 ** self.t)
            out[key] = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


def sgd_step_reference(w_j: float, lr: float, y: float, logit: float,
                       x_j: float) -> float:
    """Closed-form single-weight SGD update for a one-sample batch, l2 = 0."""
    return w_j + lr * (y - sigmoid(logit)) * x_j


def _apply(params: ModelParams, deltas: dict) -> None:
    for key, delta in deltas.items():
        if key == "w0":
            params.w0 = float(params.w0 - delta)
        elif key == "b_out":
            params.mlp.b_out = float(params.mlp.b_out - delta)
        elif key in ("w", "V"):
            getattr(params, key).__isub__(delta)
        else:
            getattr(params.mlp, key).__isub__(delta)


def _val_uauc(params: ModelParams, val_ds: Dataset) -> float:
    scores = predict(params, val_ds.indices, val_ds.values)
    value, _ = user_auc(val_ds.user_ids, scores, val_ds.labels)
    return value


def train(train_ds: Dataset, val_ds: Dataset | None,
          cfg: TrainConfig) -> tuple[ModelParams, TrainReport]:
    """Fit a model on train_ds; early-stop on val_ds per-user AUC if given.

    Raises DivergenceError as soon as a batch loss stops being finite.
    Returns the best-validation snapshot (or the final weights when no
    validation split is supplied).
    """
    t0 = time.perf_counter()
    schema = train_ds.schema
    params = init_params(schema.n, cfg.embedding_dim, cfg.arch, cfg.seed,
                         hidden=cfg.hidden, schema_digest=schema.digest())
    bias_lo, bias_hi = schema.bias_range
    if cfg.ablation == "unaware":
        params.V[bias_lo:bias_hi, :] = 0.0

    opt = Adam(cfg.lr) if cfg.optimizer == "adam" else None
    shuffle = cfg.optimizer == "adam"
    rng = np.random.default_rng([cfg.seed, 1])
    dropout = (cfg.dropout_interaction, cfg.dropout_hidden)

    n = len(train_ds)
    if n == 0:
        raise ConfigError("cannot train on an empty dataset")
    have_val = val_ds is not None and len(val_ds) > 0

    best: ModelParams | None = None
    best_uauc = -np.inf
    best_epoch = 0
    since_best = 0
    losses_by_epoch: list[float] = []
    uaucs: list[float] = []
    stopped_early = False
    epochs_run = 0

    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n) if shuffle else np.arange(n)
        batch_losses = []
        for b, lo in enumerate(range(0, n, cfg.batch_size)):
            rows = order[lo:lo + cfg.batch_size]
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                loss, grads, cache = loss_and_grads(
                    params, train_ds.indices[rows], train_ds.values[rows],
                    train_ds.labels[rows], l2=cfg.l2, train=True,
                    dropout=dropout, rng=rng,
                )
            if not np.isfinite(loss):
                logits = cache.logits[np.isfinite(cache.logits)]
                peak = float(np.abs(logits).max()) if len(logits) else float("inf")
                raise DivergenceError(epoch, b, peak)
            if cfg.ablation == "unaware":
                grads["w"][bias_lo:bias_hi] = 0.0
                grads["V"][bias_lo:bias_hi, :] = 0.0
            deltas = opt.step(grads) if opt else {k: cfg.lr * g
                                                 for k, g in grads.items()}
            _apply(params, deltas)
            batch_losses.append(loss)
        losses_by_epoch.append(float(np.mean(batch_losses)))
        epochs_run = epoch + 1

        if have_val:
            uauc = _val_uauc(params, val_ds)
            uaucs.append(uauc)
            if best is None or uauc > best_uauc:
                best = params.copy()
                best_uauc = uauc if np.isfinite(uauc) else best_uauc
                best_epoch = epoch
                since_best = 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    stopped_early = True
                    break

    if have_val and best is not None:
        params = best
    else:
        best_epoch = epochs_run - 1

    params.provenance = {
        "created_by": "train",
        "arch": cfg.arch,
        "optimizer": cfg.optimizer,
        "ablation": cfg.ablation,
        "seed": cfg.seed,
        "epochs_run": epochs_run,
        "best_epoch": best_epoch,
    }
    report = TrainReport(
        arch=cfg.arch,
        optimizer=cfg.optimizer,
        ablation=cfg.ablation,
        seed=cfg.seed,
        n_train=n,
        n_val=len(val_ds) if val_ds is not None else 0,
        epochs_run=epochs_run,
        best_epoch=best_epoch,
        train_loss=losses_by_epoch,
        val_uauc=uaucs,
        best_val_uauc=float(best_uauc) if have_val else float("nan"),
        stopped_early=stopped_early,
        wall_seconds=time.perf_counter() - t0,
    )
    return params, report
