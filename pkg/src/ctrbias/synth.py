"""Synthetic CTR data with a controllable group-level exposure bias.

The generator builds a latent-preference world (user and item factor
vectors), assigns items to groups round-robin, and draws two kinds of
exposure logs:

* a *biased* log, where the exposure policy over-serves some groups
  (frequency weights ``pi``) and, within a group, favors items the user
  already likes (per-group softmax temperature ``tau``);
* *unbiased* holdouts, where each user is shown uniformly random items.

Click probability is sigmoid(a_u . b_i + e_i + c_j) with a per-item
popularity offset e_i and a per-group offset c_j. The group offsets are
calibrated by bisection so the positive ratio of each group on the biased
training portion hits a configured target. Because the
temperatures are assigned to groups in seeded-random order, the group
ranking by training positive ratio and the ranking by unbiased positive
ratio deliberately disagree: models that copy the training ratios into
their weights mis-rank groups on unbiased traffic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, FieldSchema, chronological_split
from .errors import CalibrationError, ConfigError
from .numeric import sigmoid

BISECT_LO = -50.0
BISECT_HI = 50.0
BISECT_TOL = 1e-12


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic world and the two exposure policies.

    ``rho`` holds the per-group target positive ratios on the biased
    training split; empty means linspace(0.1, 0.9, n_groups). ``tau``
    temperatures between temp_low and temp_high control how strongly the
    biased policy matches items to user preference within each group;
    ``group_freq_decay`` < 1 skews how often each group is served at all.
    """

    n_users: int = 400
    n_items: int = 240
    n_groups: int = 8
    rho: tuple[float, ...] = ()
    exposures_per_user: int = 50
    unbiased_val_per_user: int = 2
    unbiased_test_per_user: int = 6
    pref_dim: int = 8
    pref_scale: float = 1.0
    item_offset_scale: float = 0.0
    group_freq_decay: float = 0.9
    temp_low: float = 0.2
    temp_high: float = 3.0
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    realized_tol: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_groups < 2:
            raise ConfigError("need at least 2 groups")
        if self.n_items < self.n_groups:
            raise ConfigError("need at least one item per group")
        if self.n_users < 1 or self.exposures_per_user < 1:
            raise ConfigError("need at least one user and one exposure per user")
        if self.unbiased_val_per_user < 0 or self.unbiased_test_per_user < 0:
            raise ConfigError("unbiased exposure counts must be >= 0")
        if self.unbiased_val_per_user + self.unbiased_test_per_user > self.n_items:
            raise ConfigError("unbiased exposures per user exceed catalog size")
        if self.pref_dim < 1:
            raise ConfigError("pref_dim must be >= 1")
        if self.item_offset_scale < 0:
            raise ConfigError("item_offset_scale must be >= 0")
        if not (0 < self.temp_low <= self.temp_high):
            raise ConfigError("need 0 < temp_low <= temp_high")
        if not (0 < self.group_freq_decay <= 1):
            raise ConfigError("group_freq_decay must be in (0, 1]")
        rho = self.resolved_rho()
        if len(rho) != self.n_groups:
            raise ConfigError(f"rho has {len(rho)} entries for {self.n_groups} groups")
        if np.any(rho <= 0) or np.any(rho >= 1):
            raise ConfigError("target ratios must lie strictly inside (0, 1)")

    def resolved_rho(self) -> np.ndarray:
        if self.rho:
            return np.asarray(self.rho, dtype=np.float64)
        return np.linspace(0.1, 0.9, self.n_groups)


@dataclass
class SynthResult:
    """Datasets plus the generating ground truth for diagnostics."""

    schema: FieldSchema
    train: Dataset
    val: Dataset
    test: Dataset
    unbiased_val: Dataset
    unbiased_test: Dataset
    truth: dict = field(default_factory=dict)

    @property
    def splits(self) -> dict[str, Dataset]:
        return {
            "train": self.train,
            "val": self.val,
            "test": self.test,
            "unbiased_val": self.unbiased_val,
            "unbiased_test": self.unbiased_test,
        }


def _id_strings(prefix: str, count: int) -> np.ndarray:
    width = len(str(max(count - 1, 1)))
    return np.array([f"{prefix}{i:0{width}d}" for i in range(count)])


def _calibrate_offset(d: np.ndarray, target: float, group_label: str) -> float:
    """Bisect c so that mean(sigmoid(d + c)) == target. Monotone in c."""
    lo, hi = BISECT_LO, BISECT_HI
    if not (np.mean(sigmoid(d + lo)) < target < np.mean(sigmoid(d + hi))):
        raise CalibrationError(group_label, target)
    while hi - lo > BISECT_TOL:
        mid = 0.5 * (lo + hi)
        if np.mean(sigmoid(d + mid)) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _columnar(cfg: SynthConfig, users, items, group_of):
    n = len(users)
    indices = np.empty((n, 3), dtype=np.int64)
    indices[:, 0] = users
    indices[:, 1] = cfg.n_users + items
    indices[:, 2] = cfg.n_users + cfg.n_items + group_of[items]
    return indices, np.ones((n, 3), dtype=np.float64)


def generate(cfg: SynthConfig) -> SynthResult:
    """Draw the full five-way split (biased train/val/test, unbiased val/test).

    All randomness comes from one generator seeded with cfg.seed, so equal
    configs produce identical results. Raises CalibrationError when a group
    offset cannot reach its target ratio or the realized training ratio
    lands more than cfg.realized_tol away from it.
    """
    rng = np.random.default_rng(cfg.seed)
    rho = cfg.resolved_rho()

    user_labels = _id_strings("u", cfg.n_users)
    item_labels = _id_strings("i", cfg.n_items)
    group_labels = _id_strings("g", cfg.n_groups)
    schema = FieldSchema(
        fields=(("user", cfg.n_users), ("item", cfg.n_items), ("group", cfg.n_groups)),
        bias_field="group",
        categories={
            "user": tuple(user_labels),
            "item": tuple(item_labels),
            "group": tuple(group_labels),
        },
    )

    A = rng.normal(size=(cfg.n_users, cfg.pref_dim))
    B = rng.normal(size=(cfg.n_items, cfg.pref_dim))
    item_offset = rng.normal(0.0, cfg.item_offset_scale, size=cfg.n_items) \
        if cfg.item_offset_scale > 0 else np.zeros(cfg.n_items)
    pref = (A @ B.T) * (cfg.pref_scale / np.sqrt(cfg.pref_dim))
    # label odds combine preference, popularity, and the group offset; the
    # biased exposure policy tilts by preference only
    dots = pref + item_offset
    group_of = np.arange(cfg.n_items) % cfg.n_groups

    tau = rng.permutation(np.linspace(cfg.temp_low, cfg.temp_high, cfg.n_groups))
    pi = cfg.group_freq_decay ** np.arange(cfg.n_groups, dtype=np.float64)
    pi = pi / pi.sum()

    # biased exposure log: group by pi, item within group by softmax(tau * dot)
    n_b = cfg.n_users * cfg.exposures_per_user
    users_b = np.repeat(np.arange(cfg.n_users), cfg.exposures_per_user)
    groups_b = np.searchsorted(np.cumsum(pi), rng.random(n_b), side="right")
    groups_b = np.minimum(groups_b, cfg.n_groups - 1)
    items_b = np.empty(n_b, dtype=np.int64)
    for j in range(cfg.n_groups):
        members = np.nonzero(group_of == j)[0]
        logits = tau[j] * pref[:, members]
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        cum = np.cumsum(p, axis=1)
        mask = groups_b == j
        draws = rng.random(int(mask.sum()))
        pos = (cum[users_b[mask]] < draws[:, None]).sum(axis=1)
        items_b[mask] = members[np.minimum(pos, len(members) - 1)]
    stamps_b = rng.permutation(n_b)

    # the chronological split over distinct timestamps keeps the first
    # round(n*f0) stamps for training; calibrate offsets on exactly that set
    cut = int(round(n_b * cfg.fractions[0]))
    in_train = stamps_b < cut
    c = np.empty(cfg.n_groups)
    for j in range(cfg.n_groups):
        sel = in_train & (groups_b == j)
        if not sel.any():
            raise CalibrationError(str(group_labels[j]), float(rho[j]))
        c[j] = _calibrate_offset(dots[users_b[sel], items_b[sel]], float(rho[j]),
                                 str(group_labels[j]))

    p_b = sigmoid(dots[users_b, items_b] + c[groups_b])
    labels_b = (rng.random(n_b) < p_b).astype(np.int8)
    for j in range(cfg.n_groups):
        sel = in_train & (groups_b == j)
        realized = float(labels_b[sel].mean())
        if abs(realized - rho[j]) > cfg.realized_tol:
            raise CalibrationError(str(group_labels[j]), float(rho[j]))

    idx_b, val_b = _columnar(cfg, users_b, items_b, group_of)
    biased = Dataset(schema, idx_b, val_b, labels_b, user_labels[users_b],
                     item_labels[items_b], stamps_b, split_tag="biased")
    train, val, test = chronological_split(biased, cfg.fractions)

    # unbiased holdouts: uniform items without replacement per user,
    # val and test disjoint within each user
    k_v, k_t = cfg.unbiased_val_per_user, cfg.unbiased_test_per_user
    perm = np.argsort(rng.random((cfg.n_users, cfg.n_items)), axis=1)
    unbiased = {}
    offsets = {"unbiased_val": (0, k_v), "unbiased_test": (k_v, k_v + k_t)}
    next_stamp = n_b
    for tag, (a, b) in offsets.items():
        items_u = perm[:, a:b].ravel()
        users_u = np.repeat(np.arange(cfg.n_users), b - a)
        p_u = sigmoid(dots[users_u, items_u] + c[group_of[items_u]])
        labels_u = (rng.random(len(users_u)) < p_u).astype(np.int8)
        stamps_u = next_stamp + np.arange(len(users_u), dtype=np.int64)
        next_stamp += len(users_u)
        idx_u, val_u = _columnar(cfg, users_u, items_u, group_of)
        unbiased[tag] = Dataset(schema, idx_u, val_u, labels_u, user_labels[users_u],
                                item_labels[items_u], stamps_u, split_tag=tag)

    train_ratio = np.array([
        float(labels_b[in_train & (groups_b == j)].mean()) for j in range(cfg.n_groups)
    ])
    s_uniform = np.array([
        float(sigmoid(dots[:, group_of == j] + c[j]).mean()) for j in range(cfg.n_groups)
    ])
    truth = {
        "rho_target": rho,
        "rho_train_realized": train_ratio,
        "unbiased_expected_ratio": s_uniform,
        "c": c,
        "tau": tau,
        "pi": pi,
        "group_of_item": group_of,
        "item_offset": item_offset,
        "user_factors": A,
        "item_factors": B,
    }
    return SynthResult(schema, train, val, test,
                       unbiased["unbiased_val"], unbiased["unbiased_test"], truth)
