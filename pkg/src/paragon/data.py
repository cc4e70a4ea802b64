"""Interaction logs, k-core filtering, leave-one-out splits, candidate sampling.

File format (TSV): ``user_id \t item_id \t timestamp \t cat1|cat2|... [\t group]``.
The category field may be empty.  An optional category-map file
(``item_id \t cat1|cat2``) overrides per-line categories, e.g. when broad
categories were precomputed offline.

All products are immutable after construction: every operation returns a new
dataset, so datasets can be shared read-only across parallel jobs.
"""

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .artifacts import digest, load_artifact, save_artifact
from .errors import (
    EmptyDatasetError,
    ParseError,
    SamplingError,
    SchemaError,
    SplitError,
)


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int
    categories: frozenset
    group: str | None = None


@dataclass(frozen=True)
class InteractionDataset:
    """Per-user chronological interactions plus (optionally) splits and candidates.

    Items are indexed 0..n_items-1 in sorted item-id order; categories are
    integer ids 0..num_categories-1.  ``item_categories`` is a binary
    (n_items, num_categories) matrix.
    """

    users: tuple                      # user ids, fixed order
    items: tuple                      # item ids, sorted
    num_categories: int
    item_categories: np.ndarray       # (n_items, num_categories) uint8
    user_items: tuple                 # per user: int64 array of item indices
    user_times: tuple                 # per user: int64 array of timestamps
    user_groups: tuple                # per user: group label or None
    # split products (None until leave_one_out_split)
    max_history: int | None = None
    # candidate products (None until sample_candidates)
    seed: int | None = None
    n_neg_train: int | None = None
    n_neg_eval: int | None = None
    train_negatives: tuple | None = None   # per user: (n_train_pairs, n_neg_train)
    valid_negatives: tuple | None = None   # per user: (n_neg_eval,)
    test_negatives: tuple | None = None

    @property
    def n_users(self):
        return len(self.users)

    @property
    def n_items(self):
        return len(self.items)

    @property
    def has_groups(self):
        return any(g is not None for g in self.user_groups)

    @property
    def has_split(self):
        return self.max_history is not None

    @property
    def has_candidates(self):
        return self.train_negatives is not None

    # -- split views ------------------------------------------------------

    def train_prefix(self, u):
        """Training prefix of user u (everything before the two held-out targets)."""
        self._require_split()
        return self.user_items[u][:-2]

    def train_targets(self, u):
        """Targets of the training pairs: prefix positions 1..m-1."""
        return self.train_prefix(u)[1:]

    def train_history(self, u, k):
        """History for the k-th training pair of user u, truncated."""
        prefix = self.train_prefix(u)
        lo = max(0, (k + 1) - self.max_history)
        return prefix[lo : k + 1]

    def valid_target(self, u):
        self._require_split()
        return int(self.user_items[u][-2])

    def valid_history(self, u):
        self._require_split()
        return self.user_items[u][:-2][-self.max_history :]

    def test_target(self, u):
        self._require_split()
        return int(self.user_items[u][-1])

    def test_history(self, u):
        self._require_split()
        return self.user_items[u][:-1][-self.max_history :]

    def eval_candidates(self, u, split):
        """Candidate item indices for evaluation: target first, then negatives."""
        if not self.has_candidates:
            raise SplitError("candidates not sampled yet")
        if split == "valid":
            return np.concatenate(([self.valid_target(u)], self.valid_negatives[u]))
        if split == "test":
            return np.concatenate(([self.test_target(u)], self.test_negatives[u]))
        raise ValueError(f"unknown split {split!r}")

    def train_candidates(self, u, k):
        """Candidates for training pair k of user u: target first, then negatives."""
        if not self.has_candidates:
            raise SplitError("candidates not sampled yet")
        target = int(self.train_targets(u)[k])
        return np.concatenate(([target], self.train_negatives[u][k]))

    def n_train_pairs(self, u):
        return max(0, len(self.train_prefix(u)) - 1)

    def _require_split(self):
        if not self.has_split:
            raise SplitError("dataset has not been split yet")

    def categories_of(self, item_indices):
        """Label matrix y for a list of item indices: (n, num_categories) uint8."""
        return self.item_categories[np.asarray(item_indices, dtype=np.int64)]


def _parse_categories(fieldstr, path, line_no):
    if fieldstr == "":
        return frozenset()
    cats = set()
    for tok in fieldstr.split("|"):
        try:
            cid = int(tok)
        except ValueError:
            raise ParseError(path, line_no, f"bad category id {tok!r}") from None
        if cid < 0:
            raise SchemaError(f"{path}:{line_no}: negative category id {cid}")
        cats.add(cid)
    return frozenset(cats)


def read_category_map(path):
    """Read an item -> categories map file (``item_id \\t cat1|cat2``)."""
    mapping = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(path, line_no, f"expected 2 fields, got {len(parts)}")
            mapping[parts[0]] = _parse_categories(parts[1], path, line_no)
    return mapping


def load_dataset(path, fmt="tsv", category_map=None, num_categories=None):
    """Load interactions from a TSV file into an InteractionDataset.

    Interactions are grouped per user and sorted by timestamp with a stable
    tie-break on input line order.

    Parameters
    ----------
    category_map : dict or path, optional
        item_id -> set of category ids; overrides per-line categories.
    num_categories : int, optional
        Fixes the category universe; ids >= num_categories raise SchemaError.
    """
    if fmt != "tsv":
        raise ValueError(f"unsupported format {fmt!r}")
    if category_map is not None and not isinstance(category_map, dict):
        category_map = read_category_map(category_map)

    interactions = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) not in (4, 5):
                raise ParseError(path, line_no, f"expected 4 or 5 fields, got {len(parts)}")
            user_id, item_id, ts_str, cat_str = parts[:4]
            group = parts[4] if len(parts) == 5 and parts[4] != "" else None
            try:
                ts = int(ts_str)
            except ValueError:
                raise ParseError(path, line_no, f"bad timestamp {ts_str!r}") from None
            if category_map is not None:
                cats = frozenset(category_map.get(item_id, frozenset()))
            else:
                cats = _parse_categories(cat_str, path, line_no)
            interactions.append(Interaction(user_id, item_id, ts, cats, group))

    return build_dataset(interactions, num_categories=num_categories)


def build_dataset(interactions, num_categories=None):
    """Assemble an InteractionDataset from parsed interactions."""
    max_cat = -1
    item_cats = {}
    for it in interactions:
        if it.categories:
            max_cat = max(max_cat, max(it.categories))
        prev = item_cats.setdefault(it.item_id, it.categories)
        if prev != it.categories:
            raise SchemaError(f"item {it.item_id!r} has inconsistent categories")
    n_cats = (max_cat + 1) if num_categories is None else num_categories
    if max_cat >= n_cats:
        raise SchemaError(f"category id {max_cat} out of range (|M|={n_cats})")

    by_user = {}
    groups = {}
    for it in interactions:
        by_user.setdefault(it.user_id, []).append(it)
        if it.group is not None:
            prev = groups.setdefault(it.user_id, it.group)
            if prev != it.group:
                raise SchemaError(f"user {it.user_id!r} has conflicting group labels")

    users = tuple(by_user.keys())          # first-appearance order
    items = tuple(sorted(item_cats.keys()))
    item_index = {iid: i for i, iid in enumerate(items)}

    cat_matrix = np.zeros((len(items), n_cats), dtype=np.uint8)
    for iid, cats in item_cats.items():
        for c in cats:
            cat_matrix[item_index[iid], c] = 1

    user_items, user_times = [], []
    for uid in users:
        seq = by_user[uid]
        order = sorted(range(len(seq)), key=lambda i: (seq[i].timestamp, i))
        user_items.append(np.array([item_index[seq[i].item_id] for i in order], dtype=np.int64))
        user_times.append(np.array([seq[i].timestamp for i in order], dtype=np.int64))

    return InteractionDataset(
        users=users,
        items=items,
        num_categories=n_cats,
        item_categories=cat_matrix,
        user_items=tuple(user_items),
        user_times=tuple(user_times),
        user_groups=tuple(groups.get(uid) for uid in users),
    )


def kcore_filter(ds, k):
    """Drop users with fewer than k interactions and rebuild the item catalog."""
    if k < 1:
        raise ValueError("k must be >= 1")
    keep = [u for u in range(ds.n_users) if len(ds.user_items[u]) >= k]
    if not keep and ds.n_users > 0:
        raise EmptyDatasetError(f"{k}-core filtering removed all {ds.n_users} users")
    if len(keep) == ds.n_users:
        return ds

    used = sorted({int(i) for u in keep for i in ds.user_items[u]})
    remap = np.full(ds.n_items, -1, dtype=np.int64)
    for new, old in enumerate(used):
        remap[old] = new

    return InteractionDataset(
        users=tuple(ds.users[u] for u in keep),
        items=tuple(ds.items[i] for i in used),
        num_categories=ds.num_categories,
        item_categories=ds.item_categories[np.array(used, dtype=np.int64)],
        user_items=tuple(remap[ds.user_items[u]] for u in keep),
        user_times=tuple(ds.user_times[u] for u in keep),
        user_groups=tuple(ds.user_groups[u] for u in keep),
    )


def leave_one_out_split(ds, max_history=20):
    """Mark the last interaction as test target and the second-to-last as
    validation target; histories are truncated to the most recent
    ``max_history`` items wherever they are consumed."""
    if max_history < 1:
        raise ValueError("max_history must be >= 1")
    for u in range(ds.n_users):
        if len(ds.user_items[u]) < 3:
            raise SplitError(
                f"user {ds.users[u]!r} has {len(ds.user_items[u])} interactions; "
                "leave-one-out needs at least 3"
            )
    return replace(ds, max_history=max_history)


def sample_candidates(ds, n_neg_train=9, n_neg_eval=99, seed=0):
    """Sample fixed candidate sets: uniform negatives over items the user never
    interacted with, deterministic under ``seed``.

    Evaluation sets get ``n_neg_eval`` negatives, each training pair gets
    ``n_neg_train``, and the target is always candidate 0.
    """
    ds._require_split()
    if ds.n_items <= n_neg_eval:
        raise SamplingError(
            f"catalog has {ds.n_items} items; need more than {n_neg_eval}"
        )
    train_negs, valid_negs, test_negs = [], [], []
    for u in range(ds.n_users):
        rng = np.random.default_rng([seed, u])
        eligible = np.setdiff1d(
            np.arange(ds.n_items, dtype=np.int64), ds.user_items[u]
        )
        if len(eligible) < n_neg_eval:
            raise SamplingError(
                f"user {ds.users[u]!r} has only {len(eligible)} eligible negatives; "
                f"need {n_neg_eval}"
            )
        n_pairs = max(0, len(ds.user_items[u]) - 3)
        rows = np.empty((n_pairs, n_neg_train), dtype=np.int64)
        for k in range(n_pairs):
            rows[k] = rng.choice(eligible, size=n_neg_train, replace=False)
        train_negs.append(rows)
        valid_negs.append(rng.choice(eligible, size=n_neg_eval, replace=False))
        test_negs.append(rng.choice(eligible, size=n_neg_eval, replace=False))

    return replace(
        ds,
        seed=seed,
        n_neg_train=n_neg_train,
        n_neg_eval=n_neg_eval,
        train_negatives=tuple(train_negs),
        valid_negatives=tuple(valid_negs),
        test_negatives=tuple(test_negs),
    )


# -- serialization ---------------------------------------------------------

def save_dataset(ds, directory):
    """Serialize to ``manifest.json`` + a binary arrays artifact."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "users": list(ds.users),
        "items": list(ds.items),
        "num_categories": ds.num_categories,
        "user_groups": list(ds.user_groups),
        "max_history": ds.max_history,
        "seed": ds.seed,
        "n_neg_train": ds.n_neg_train,
        "n_neg_eval": ds.n_neg_eval,
        "counts": {"users": ds.n_users, "items": ds.n_items,
                   "interactions": int(sum(len(x) for x in ds.user_items))},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))

    tensors = {"item_categories": ds.item_categories}
    lengths = np.array([len(x) for x in ds.user_items], dtype=np.int64)
    tensors["history_lengths"] = lengths
    if ds.n_users:
        tensors["flat_items"] = np.concatenate(ds.user_items)
        tensors["flat_times"] = np.concatenate(ds.user_times)
    else:
        tensors["flat_items"] = np.zeros(0, dtype=np.int64)
        tensors["flat_times"] = np.zeros(0, dtype=np.int64)
    if ds.has_candidates:
        pair_counts = np.array([len(t) for t in ds.train_negatives], dtype=np.int64)
        tensors["train_pair_counts"] = pair_counts
        tensors["flat_train_negatives"] = (
            np.concatenate([t.reshape(-1) for t in ds.train_negatives])
            if pair_counts.sum() else np.zeros(0, dtype=np.int64)
        )
        tensors["valid_negatives"] = np.stack(ds.valid_negatives) if ds.n_users else np.zeros((0, 0), dtype=np.int64)
        tensors["test_negatives"] = np.stack(ds.test_negatives) if ds.n_users else np.zeros((0, 0), dtype=np.int64)
    save_artifact(directory / "arrays.bin", "dataset-arrays",
                  {"dataset_digest": dataset_digest(ds)}, tensors)


def load_dataset_dir(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    kind, _, tensors = load_artifact(directory / "arrays.bin")
    if kind != "dataset-arrays":
        raise SchemaError(f"unexpected artifact kind {kind!r}")
    lengths = tensors["history_lengths"]
    offsets = np.concatenate(([0], np.cumsum(lengths)))
    user_items = tuple(
        tensors["flat_items"][offsets[u] : offsets[u + 1]] for u in range(len(lengths))
    )
    user_times = tuple(
        tensors["flat_times"][offsets[u] : offsets[u + 1]] for u in range(len(lengths))
    )
    kwargs = {}
    if "train_pair_counts" in tensors:
        counts = tensors["train_pair_counts"]
        n_neg_train = manifest["n_neg_train"]
        poffsets = np.concatenate(([0], np.cumsum(counts * n_neg_train)))
        kwargs.update(
            train_negatives=tuple(
                tensors["flat_train_negatives"][poffsets[u] : poffsets[u + 1]]
                .reshape(int(counts[u]), n_neg_train)
                for u in range(len(counts))
            ),
            valid_negatives=tuple(tensors["valid_negatives"]),
            test_negatives=tuple(tensors["test_negatives"]),
            seed=manifest["seed"],
            n_neg_train=n_neg_train,
            n_neg_eval=manifest["n_neg_eval"],
        )
    return InteractionDataset(
        users=tuple(manifest["users"]),
        items=tuple(manifest["items"]),
        num_categories=manifest["num_categories"],
        item_categories=tensors["item_categories"],
        user_items=user_items,
        user_times=user_times,
        user_groups=tuple(manifest["user_groups"]),
        max_history=manifest["max_history"],
        **kwargs,
    )


def dataset_digest(ds):
    """Stable content hash covering ids, interactions, splits and candidates."""
    parts = {
        "users": list(ds.users),
        "items": list(ds.items),
        "num_categories": ds.num_categories,
        "groups": list(ds.user_groups),
        "max_history": ds.max_history,
        "seed": ds.seed,
        "n_neg_train": ds.n_neg_train,
        "n_neg_eval": ds.n_neg_eval,
        "cats": ds.item_categories.tobytes().hex(),
        "items_flat": b"".join(x.tobytes() for x in ds.user_items).hex(),
        "times_flat": b"".join(x.tobytes() for x in ds.user_times).hex(),
    }
    if ds.has_candidates:
        parts["train_negs"] = b"".join(x.tobytes() for x in ds.train_negatives).hex()
        parts["valid_negs"] = b"".join(x.tobytes() for x in ds.valid_negatives).hex()
        parts["test_negs"] = b"".join(x.tobytes() for x in ds.test_negatives).hex()
    return digest(parts)
