"""Synthetic interaction fixtures with a tunable accuracy/diversity tension.

Items are organized into per-category "channels".  Each user walks one home
channel almost deterministically (next item = successor position), with
occasional exploration jumps to other channels.  The held-out targets always
follow the in-channel walk, so an accuracy-driven model can rank them highly,
while top lists concentrated on the home channel cover few categories,
leaving clear headroom for diversity-driven reranking.

The grouped variant assigns minority-group users to their own channels with
shorter histories, which yields a persistent accuracy gap between groups for
fairness experiments.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class FixtureSpec:
    n_users: int = 240
    n_categories: int = 8
    items_per_channel: int = 30
    min_history: int = 16
    max_history: int = 30
    loyalty: float = 0.85          # probability a step follows the home channel walk
    walk_jitter: int = 2           # successor offset is 1 + U{0..jitter}
    secondary_cat_frac: float = 0.3
    no_cat_frac: float = 0.05
    with_groups: bool = False
    minority_frac: float = 0.35
    minority_min_history: int = 9
    minority_max_history: int = 15
    seed: int = 7

    @property
    def n_items(self):
        return self.n_categories * self.items_per_channel


def _item_categories(spec, rng):
    """Primary category = channel; some items get the next channel as a second
    category; a small fraction carries no category at all."""
    cats = []
    for i in range(spec.n_items):
        chan = i // spec.items_per_channel
        if rng.random() < spec.no_cat_frac:
            cats.append(())
            continue
        entry = [chan]
        if rng.random() < spec.secondary_cat_frac:
            entry.append((chan + 1) % spec.n_categories)
        cats.append(tuple(sorted(entry)))
    return cats


def generate_fixture(spec=FixtureSpec()):
    """Build fixture rows: list of (user, item, timestamp, cats, group|None)."""
    rng = np.random.default_rng(spec.seed)
    item_cats = _item_categories(spec, rng)
    width = spec.items_per_channel

    if spec.with_groups:
        n_minority = int(round(spec.n_users * spec.minority_frac))
        groups = ["f"] * n_minority + ["m"] * (spec.n_users - n_minority)
        rng.shuffle(groups)
        majority_channels = list(range(spec.n_categories // 2))
        minority_channels = list(range(spec.n_categories // 2, spec.n_categories))
    else:
        groups = [None] * spec.n_users

    rows = []
    for u in range(spec.n_users):
        group = groups[u]
        if group == "f":
            home = int(rng.choice(minority_channels))
            length = int(rng.integers(spec.minority_min_history, spec.minority_max_history + 1))
        elif group == "m":
            home = int(rng.choice(majority_channels))
            length = int(rng.integers(spec.min_history, spec.max_history + 1))
        else:
            home = int(rng.integers(spec.n_categories))
            length = int(rng.integers(spec.min_history, spec.max_history + 1))

        pos = int(rng.integers(width))
        ts = int(rng.integers(1, 50))
        seq = []
        for step in range(length):
            # the two held-out targets always follow the in-channel walk
            forced = step >= length - 2
            pos = (pos + 1 + int(rng.integers(spec.walk_jitter + 1))) % width
            if forced or rng.random() < spec.loyalty:
                item = home * width + pos
            else:
                item = int(rng.integers(spec.n_items))
            ts += int(rng.integers(1, 4)) * 86_400
            seq.append((item, ts))
        uid = f"u{u:04d}"
        for item, t in seq:
            rows.append((uid, f"i{item:04d}", t, item_cats[item], group))
    return rows


def write_fixture_tsv(path, spec=FixtureSpec()):
    """Write a fixture TSV; returns the path."""
    rows = generate_fixture(spec)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for user, item, ts, cats, group in rows:
            cat_str = "|".join(str(c) for c in cats)
            fields = [user, item, str(ts), cat_str]
            if group is not None:
                fields.append(group)
            fh.write("\t".join(fields) + "\n")
    return path


DESK = FixtureSpec()
DESK_SMALL = FixtureSpec(
    n_users=100, n_categories=6, items_per_channel=20,
    min_history=10, max_history=18, seed=11,
)
DESK_GROUPED = FixtureSpec(with_groups=True, seed=13)

PRESETS = {"desk": DESK, "desk-small": DESK_SMALL, "desk-grouped": DESK_GROUPED}
