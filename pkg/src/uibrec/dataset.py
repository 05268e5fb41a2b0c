"""Interaction data: ingestion, leave-one-out splits, frozen evaluation
candidates and uniform negative sampling."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable

import numpy as np

from . import kernels

_log = logging.getLogger(__name__)

FORMATS = ("movielens-ratings", "lastfm-tsv", "amazon-csv")
ROLES = ("raw", "train", "valid", "test")
CANDIDATE_MAGIC = "# uibrec-candidates v1"
_HEADER_TOKENS = {"user", "userid", "user_id", "reviewerid"}
_ROLE_STREAM = {"valid": 1, "test": 2}


class DatasetError(ValueError):
    """Malformed or unusable interaction data."""

    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


@dataclass(frozen=True, eq=False)
class InteractionSet:
    """Per-user sorted item lists in CSR form.

    ``timestamps`` (optional) is aligned with ``indices``.  ``user_ids`` /
    ``item_ids`` carry the raw identifiers for dense index ``i`` when the set
    came from a file.
    """

    indptr: np.ndarray
    indices: np.ndarray
    n_users: int
    n_items: int
    role: str = "raw"
    timestamps: np.ndarray | None = None
    user_ids: tuple[str, ...] | None = None
    item_ids: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.indptr.shape != (self.n_users + 1,):
            raise ValueError("indptr length must be n_users + 1")

    @classmethod
    def from_pairs(cls, users, items, n_users: int, n_items: int, role: str = "raw",
                   timestamps=None, user_ids=None, item_ids=None) -> InteractionSet:
        """Build from parallel arrays; duplicate pairs collapse to one (latest
        timestamp kept)."""
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        if users.shape != items.shape:
            raise ValueError("users and items differ in length")
        if users.size and (users.min() < 0 or users.max() >= n_users
                           or items.min() < 0 or items.max() >= n_items):
            raise ValueError("index out of range")
        ts = None if timestamps is None else np.asarray(timestamps, dtype=np.int64)
        if ts is not None:
            order = np.lexsort((-ts, items, users))
        else:
            order = np.lexsort((items, users))
        u, x = users[order], items[order]
        keep = np.ones(u.size, dtype=bool)
        keep[1:] = (u[1:] != u[:-1]) | (x[1:] != x[:-1])
        u, x = u[keep], x[keep]
        if ts is not None:
            ts = ts[order][keep]
        indptr = np.zeros(n_users + 1, dtype=np.int64)
        np.cumsum(np.bincount(u, minlength=n_users), out=indptr[1:])
        return cls(indptr, x, int(n_users), int(n_items), role, ts,
                   None if user_ids is None else tuple(user_ids),
                   None if item_ids is None else tuple(item_ids))

    @property
    def n_interactions(self) -> int:
        return int(self.indices.size)

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def items_of(self, user: int) -> np.ndarray:
        return self.indices[self.indptr[user]:self.indptr[user + 1]]

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        users = np.repeat(np.arange(self.n_users, dtype=np.int64), self.degrees())
        return users, self.indices

    @cached_property
    def keys(self) -> np.ndarray:
        return kernels.pair_keys(self.indptr, self.indices, self.n_items)

    def contains(self, users, items) -> np.ndarray:
        return kernels.observed_mask(self.indptr, self.indices, self.n_items,
                                     users, items, self.keys)

    def with_role(self, role: str) -> InteractionSet:
        return InteractionSet(self.indptr, self.indices, self.n_users, self.n_items, role,
                              self.timestamps, self.user_ids, self.item_ids)

    def union(self, *others: InteractionSet) -> InteractionSet:
        us, xs = [self.pairs()[0]], [self.indices]
        for o in others:
            if o.n_users != self.n_users or o.n_items != self.n_items:
                raise ValueError("shape mismatch in union")
            u, x = o.pairs()
            us.append(u)
            xs.append(x)
        return InteractionSet.from_pairs(np.concatenate(us), np.concatenate(xs),
                                         self.n_users, self.n_items, "raw")

    def held_out(self) -> np.ndarray:
        """The single item per user of a valid/test set."""
        if not np.all(self.degrees() == 1):
            raise ValueError("held-out sets need exactly one item per user")
        return self.indices.copy()

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray([self.n_users, self.n_items], dtype="<i8").tobytes())
        h.update(self.indptr.astype("<i8").tobytes())
        h.update(self.indices.astype("<i8").tobytes())
        return h.hexdigest()


# -- ingestion -------------------------------------------------------------


def _split_fields(line: str, fmt: str) -> list[str]:
    if fmt == "movielens-ratings":
        return line.split("::") if "::" in line else line.split()
    if fmt == "amazon-csv":
        return next(csv.reader([line]))
    return line.split()


def parse_records(lines: Iterable[str], fmt: str):
    """Yield ``(lineno, raw_user, raw_item, timestamp | None)``."""
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = [f.strip() for f in _split_fields(line, fmt)]
        if lineno == 1 and fields and fields[0].lower() in _HEADER_TOKENS:
            continue
        if len(fields) < 2 or not fields[0] or not fields[1]:
            raise DatasetError(f"expected at least user and item fields, got {line!r}", lineno)
        ts = None
        if fmt in ("movielens-ratings", "amazon-csv") and len(fields) >= 4:
            try:
                ts = int(float(fields[3]))
            except ValueError:
                raise DatasetError(f"bad timestamp {fields[3]!r}", lineno) from None
        if len(fields) >= 3 and fields[2]:
            try:
                float(fields[2])
            except ValueError:
                raise DatasetError(f"bad rating/weight {fields[2]!r}", lineno) from None
        yield lineno, fields[0], fields[1], ts


def k_core(users: np.ndarray, items: np.ndarray, k: int) -> np.ndarray:
    """Mask of pairs surviving iterative k-core filtering on both sides."""
    keep = np.ones(users.size, dtype=bool)
    while True:
        ud = np.bincount(users[keep], minlength=users.max() + 1 if users.size else 0)
        idg = np.bincount(items[keep], minlength=items.max() + 1 if items.size else 0)
        bad = keep & ((ud[users] < k) | (idg[items] < k))
        if not bad.any():
            return keep
        keep &= ~bad


def ingest(path, fmt: str, min_core: int | None = None) -> InteractionSet:
    """Read a raw interaction log into a dense-indexed, deduplicated set.

    Any rating counts as an interaction.  ``min_core`` defaults to 5 for
    Amazon review files and no filtering otherwise.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"no such file: {path}")
    with open(path, encoding="utf-8", errors="replace") as fh:
        return ingest_lines(fh, fmt, min_core)


def ingest_lines(lines: Iterable[str], fmt: str, min_core: int | None = None) -> InteractionSet:
    if min_core is None:
        min_core = 5 if fmt == "amazon-csv" else 0
    uid: dict[str, int] = {}
    iid: dict[str, int] = {}
    us, xs, ts = [], [], []
    have_ts = True
    for _, ru, ri, t in parse_records(lines, fmt):
        us.append(uid.setdefault(ru, len(uid)))
        xs.append(iid.setdefault(ri, len(iid)))
        if t is None:
            have_ts = False
        ts.append(0 if t is None else t)
    if not us:
        raise DatasetError("no interactions found (empty file)")
    users = np.asarray(us, dtype=np.int64)
    items = np.asarray(xs, dtype=np.int64)
    times = np.asarray(ts, dtype=np.int64) if have_ts else None
    user_ids = np.asarray(list(uid), dtype=object)
    item_ids = np.asarray(list(iid), dtype=object)
    if min_core and min_core > 1:
        # dedup first so repeated reviews do not count towards the core
        base = InteractionSet.from_pairs(users, items, len(uid), len(iid), timestamps=times)
        users, items = base.pairs()
        times = base.timestamps
        keep = k_core(users, items, min_core)
        users, items = users[keep], items[keep]
        times = None if times is None else times[keep]
        if users.size == 0:
            raise DatasetError(f"nothing survives {min_core}-core filtering")
    # re-densify in first-seen order of the surviving ids
    u_old, u_new = np.unique(users, return_inverse=True)
    x_old, x_new = np.unique(items, return_inverse=True)
    return InteractionSet.from_pairs(
        u_new, x_new, u_old.size, x_old.size, "raw", times,
        tuple(str(v) for v in user_ids[u_old]), tuple(str(v) for v in item_ids[x_old]))


# -- leave-one-out split ---------------------------------------------------


@dataclass(frozen=True, eq=False)
class Split:
    train: InteractionSet
    valid: InteractionSet
    test: InteractionSet
    seed: int
    excluded_users: int = 0
    stats: dict = field(default_factory=dict)


def _restrict_users(data: InteractionSet, keep: np.ndarray) -> InteractionSet:
    users, items = data.pairs()
    new_id = np.cumsum(keep) - 1
    mask = keep[users]
    ts = None if data.timestamps is None else data.timestamps[mask]
    uids = None if data.user_ids is None else tuple(np.asarray(data.user_ids, dtype=object)[keep])
    return InteractionSet.from_pairs(new_id[users[mask]], items[mask], int(keep.sum()),
                                     data.n_items, data.role, ts, uids, data.item_ids)


def split_leave_one_out(data: InteractionSet, seed: int = 0) -> Split:
    """Hold out one item per user for test and one for validation.

    With timestamps the latest interaction goes to test and the second
    latest to validation; otherwise both are drawn at random under ``seed``.
    Users with fewer than three interactions are dropped and counted.
    """
    deg = data.degrees()
    keep = deg >= 3
    excluded = int((~keep).sum())
    if excluded:
        _log.info("excluding %d users with fewer than 3 interactions", excluded)
        data = _restrict_users(data, keep)
    if data.n_users == 0:
        raise DatasetError("no user has at least 3 interactions")
    rng = np.random.default_rng(seed)
    users, items = data.pairs()
    n = users.size
    if data.timestamps is not None:
        # rank within user by (timestamp, item) descending
        order = np.lexsort((items, data.timestamps, users))
    else:
        order = np.lexsort((rng.random(n), users))
    ends = data.indptr[1:]
    test_pos = order[ends - 1]
    valid_pos = order[ends - 2]
    role = np.zeros(n, dtype=np.int8)
    role[valid_pos] = 1
    role[test_pos] = 2
    u_ids, x_ids = data.user_ids, data.item_ids

    def part(code, name):
        m = role == code
        return InteractionSet.from_pairs(users[m], items[m], data.n_users, data.n_items, name,
                                         user_ids=u_ids, item_ids=x_ids)

    train, valid, test = part(0, "train"), part(1, "valid"), part(2, "test")
    stats = {
        "users": data.n_users, "items": data.n_items, "train": train.n_interactions,
        "valid": valid.n_interactions, "test": test.n_interactions,
        "excluded_users": excluded, "timestamped": data.timestamps is not None,
    }
    return Split(train, valid, test, int(seed), excluded, stats)


# -- evaluation candidates -------------------------------------------------


@dataclass(frozen=True, eq=False)
class EvalCandidates:
    """Per held-out positive, a fixed list of unobserved negatives."""

    role: str
    users: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    seed: int

    @property
    def n_neg(self) -> int:
        return int(self.negatives.shape[1])

    def __len__(self) -> int:
        return int(self.users.size)

    def items(self) -> np.ndarray:
        """Candidate matrix with the positive in column 0."""
        return np.concatenate([self.positives[:, None], self.negatives], axis=1)

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"{CANDIDATE_MAGIC} role={self.role} seed={self.seed} "
                  f"n_neg={self.n_neg} rows={len(self)}\n")
        for u, p, negs in zip(self.users, self.positives, self.negatives):
            buf.write(f"{u},{p},{','.join(map(str, negs))}\n")
        return buf.getvalue()

    def save(self, path) -> str:
        data = self.to_text().encode()
        Path(path).write_bytes(data)
        return hashlib.sha256(data).hexdigest()

    @classmethod
    def load(cls, path) -> EvalCandidates:
        lines = Path(path).read_text().splitlines()
        if not lines or not lines[0].startswith(CANDIDATE_MAGIC):
            raise DatasetError(f"{path}: not a candidate file")
        meta = dict(tok.split("=", 1) for tok in lines[0][len(CANDIDATE_MAGIC):].split())
        n_neg = int(meta["n_neg"])
        rows = []
        for lineno, line in enumerate(lines[1:], start=2):
            vals = line.split(",")
            if len(vals) != n_neg + 2:
                raise DatasetError(f"expected {n_neg + 2} fields", lineno)
            rows.append([int(v) for v in vals])
        if len(rows) != int(meta["rows"]):
            raise DatasetError(f"{path}: row count mismatch")
        arr = np.asarray(rows, dtype=np.int64).reshape(-1, n_neg + 2)
        return cls(meta["role"], arr[:, 0], arr[:, 1], arr[:, 2:], int(meta["seed"]))


def build_candidates(train: InteractionSet, valid: InteractionSet, test: InteractionSet,
                     n_neg: int = 100, seed: int = 0, role: str = "test") -> EvalCandidates:
    """Draw ``n_neg`` distinct negatives per held-out positive of ``role``,
    excluding every item the user touched in any split."""
    held = {"test": test, "valid": valid}[role]
    observed = train.union(valid, test)
    rng = np.random.default_rng([seed, _ROLE_STREAM[role]])
    users = np.arange(held.n_users, dtype=np.int64)[held.degrees() == 1]
    positives = held.indices[held.indptr[users]]
    negs = np.empty((users.size, n_neg), dtype=np.int64)
    n_items = observed.n_items
    for row, u in enumerate(users):
        seen = observed.items_of(u)
        pool = n_items - seen.size
        if pool < n_neg:
            raise DatasetError(f"user {u}: only {pool} unobserved items for {n_neg} negatives")
        if pool < 4 * n_neg:
            free = np.setdiff1d(np.arange(n_items), seen, assume_unique=True)
            negs[row] = rng.choice(free, n_neg, replace=False)
            continue
        got: list[int] = []
        taken: set[int] = set()
        seen_set = set(seen.tolist())
        while len(got) < n_neg:
            for x in rng.integers(0, n_items, 2 * n_neg).tolist():
                if x not in seen_set and x not in taken:
                    taken.add(x)
                    got.append(x)
                    if len(got) == n_neg:
                        break
        negs[row] = got
    return EvalCandidates(role, users, positives, negs, int(seed))


# -- training batches ------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TrainBatch:
    users: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray  # (batch, m_neg)

    @property
    def size(self) -> int:
        return int(self.users.size)


def check_sampleable(train: InteractionSet) -> None:
    full = np.flatnonzero(train.degrees() >= train.n_items)
    if full.size:
        raise DatasetError(f"user {full[0]} has interacted with every item; no negatives exist")


def sample_negatives(train: InteractionSet, users: np.ndarray, m_neg: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Uniform unobserved items, ``m_neg`` per user, by rejection."""
    users = np.asarray(users, dtype=np.int64)
    neg = rng.integers(0, train.n_items, size=(users.size, m_neg))
    flat_u = np.repeat(users, m_neg)
    flat = neg.reshape(-1)
    bad = np.flatnonzero(train.contains(flat_u, flat))
    while bad.size:
        flat[bad] = rng.integers(0, train.n_items, size=bad.size)
        still = train.contains(flat_u[bad], flat[bad])
        bad = bad[still]
    return neg


def sample_batch(train: InteractionSet, batch_size: int, m_neg: int,
                 rng: np.random.Generator) -> TrainBatch:
    """Positives uniformly with replacement from the training pairs, each
    with ``m_neg`` uniform unobserved negatives."""
    if batch_size < 1 or m_neg < 1:
        raise ValueError("batch_size and m_neg must be >= 1")
    if train.n_interactions == 0:
        raise DatasetError("empty training set")
    idx = rng.integers(0, train.n_interactions, size=batch_size)
    users = np.searchsorted(train.indptr, idx, side="right") - 1
    pos = train.indices[idx]
    return TrainBatch(users, pos, sample_negatives(train, users, m_neg, rng))


# -- on-disk bundle --------------------------------------------------------


@dataclass(eq=False)
class DatasetBundle:
    """Everything a training run needs: the three splits plus frozen
    validation and test candidates."""

    name: str
    train: InteractionSet
    valid: InteractionSet
    test: InteractionSet
    cand_valid: EvalCandidates
    cand_test: EvalCandidates
    manifest: dict = field(default_factory=dict)

    @property
    def n_users(self) -> int:
        return self.train.n_users

    @property
    def n_items(self) -> int:
        return self.train.n_items

    def observed(self) -> InteractionSet:
        return self.train.union(self.valid, self.test)

    def save(self, root) -> dict:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        arrays = {}
        for r in ("train", "valid", "test"):
            s = getattr(self, r)
            arrays[f"{r}_indptr"] = s.indptr
            arrays[f"{r}_indices"] = s.indices
        arrays["shape"] = np.asarray([self.n_users, self.n_items], dtype=np.int64)
        with open(root / "interactions.npz", "wb") as fh:
            np.savez(fh, **arrays)
        if self.train.user_ids is not None:
            (root / "users.tsv").write_text(
                "".join(f"{i}\t{r}\n" for i, r in enumerate(self.train.user_ids)))
        if self.train.item_ids is not None:
            (root / "items.tsv").write_text(
                "".join(f"{i}\t{r}\n" for i, r in enumerate(self.train.item_ids)))
        manifest = dict(self.manifest)
        manifest["name"] = self.name
        manifest["candidates"] = {
            "valid": {"file": "candidates_valid.csv", "sha256": self.cand_valid.save(root / "candidates_valid.csv"),
                      "seed": self.cand_valid.seed, "n_neg": self.cand_valid.n_neg},
            "test": {"file": "candidates_test.csv", "sha256": self.cand_test.save(root / "candidates_test.csv"),
                     "seed": self.cand_test.seed, "n_neg": self.cand_test.n_neg},
        }
        manifest["checksums"] = {r: getattr(self, r).checksum() for r in ("train", "valid", "test")}
        (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        self.manifest = manifest
        return manifest

    @classmethod
    def load(cls, root) -> DatasetBundle:
        root = Path(root)
        if not (root / "manifest.json").exists():
            raise DatasetError(f"{root}: no prepared dataset (manifest.json missing)")
        manifest = json.loads((root / "manifest.json").read_text())
        with np.load(root / "interactions.npz") as z:
            n_users, n_items = (int(v) for v in z["shape"])
            uids = _read_map(root / "users.tsv")
            iids = _read_map(root / "items.tsv")
            sets = {r: InteractionSet(z[f"{r}_indptr"].astype(np.int64), z[f"{r}_indices"].astype(np.int64),
                                      n_users, n_items, r, None, uids, iids)
                    for r in ("train", "valid", "test")}
        cv = EvalCandidates.load(root / "candidates_valid.csv")
        ct = EvalCandidates.load(root / "candidates_test.csv")
        return cls(manifest.get("name", root.name), sets["train"], sets["valid"], sets["test"], cv, ct, manifest)


def _read_map(path: Path) -> tuple[str, ...] | None:
    if not path.exists():
        return None
    out = []
    for i, line in enumerate(path.read_text().splitlines()):
        dense, raw = line.split("\t", 1)
        if int(dense) != i:
            raise DatasetError(f"{path}: ids not contiguous", i + 1)
        out.append(raw)
    return tuple(out)


def prepare_bundle(data: InteractionSet, name: str, split_seed: int = 0, n_neg: int = 100,
                   candidate_seed: int | None = None) -> DatasetBundle:
    split = split_leave_one_out(data, split_seed)
    cseed = split_seed if candidate_seed is None else candidate_seed
    cv = build_candidates(split.train, split.valid, split.test, n_neg, cseed, role="valid")
    ct = build_candidates(split.train, split.valid, split.test, n_neg, cseed, role="test")
    manifest = {"split_seed": split.seed, "candidate_seed": cseed, "stats": split.stats}
    return DatasetBundle(name, split.train, split.valid, split.test, cv, ct, manifest)
