"""Shared builders for small schemas, datasets, and models."""

import numpy as np
import pytest

from ctrbias.data import Dataset, FieldSchema, Sample
from ctrbias.models import init_params


def make_schema(n_users=4, n_items=6, n_groups=3):
    """user/item/group schema in the layout the synthetic generator uses."""
    return FieldSchema(
        fields=(("user", n_users), ("item", n_items), ("group", n_groups)),
        bias_field="group",
        categories={
            "user": tuple(f"u{i}" for i in range(n_users)),
            "item": tuple(f"i{i}" for i in range(n_items)),
            "group": tuple(f"g{i}" for i in range(n_groups)),
        },
    )


def random_dataset(rng, n_users=4, n_items=6, n_groups=3, n_rows=30,
                   multi_group_prob=0.0, split_tag="test"):
    """Random interaction log; rows may carry two groups (value 1/2 each)."""
    schema = make_schema(n_users, n_items, n_groups)
    samples = []
    for t in range(n_rows):
        u = int(rng.integers(n_users))
        i = int(rng.integers(n_items))
        if n_groups >= 2 and rng.random() < multi_group_prob:
            g = sorted(rng.choice(n_groups, size=2, replace=False).tolist())
            g_idx = [n_users + n_items + j for j in g]
            g_val = [0.5, 0.5]
        else:
            g_idx = [n_users + n_items + int(rng.integers(n_groups))]
            g_val = [1.0]
        samples.append(Sample(
            indices=np.array([u, n_users + i] + g_idx),
            values=np.array([1.0, 1.0] + g_val),
            label=int(rng.integers(2)),
            user_id=f"u{u}",
            item_id=f"i{i}",
            timestamp=t,
        ))
    return Dataset.from_samples(schema, samples, split_tag=split_tag)


def random_params(rng, n, d, arch="fm", hidden=4, scale=0.5):
    """Model with non-trivial weights everywhere, for scoring tests."""
    params = init_params(n, d, arch, seed=int(rng.integers(2 ** 31)), hidden=hidden)
    params.w0 = float(rng.normal() * scale)
    params.w = rng.normal(size=n) * scale
    params.V = rng.normal(size=(n, d)) * scale
    if arch == "nfm":
        params.mlp.W1 = rng.normal(size=params.mlp.W1.shape) * scale
        params.mlp.b1 = rng.normal(size=params.mlp.b1.shape) * scale
        params.mlp.w_out = rng.normal(size=params.mlp.w_out.shape) * scale
        params.mlp.b_out = float(rng.normal() * scale)
    return params


@pytest.fixture
def rng():
    return np.random.default_rng(20260823)
