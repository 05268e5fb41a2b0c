"""Score functions s(u, x), the boundary head b_u and their gradients.

Four scorers share one parameter layout:

* ``mf``     -- inner product of user and item embeddings
* ``mlp``    -- MLP tower over the concatenated embeddings (raw logit)
* ``metric`` -- negated squared Euclidean distance, so higher is better
* ``gcn``    -- inner product of LightGCN-propagated embeddings

The boundary head is ``b_u = W . P_u`` on the raw user embedding for every
scorer.  Parameters live in ``ModelState.params``; row-sparse tables (``P``,
``Q``, ``margins``) receive gradients as ``(rows, values)`` pairs so that the
optimizer only touches what a batch used.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import kernels
from .dataset import InteractionSet

KINDS = ("mf", "mlp", "metric", "gcn")
ROW_SPARSE = ("P", "Q", "margins")
CKPT_MAGIC = b"UIBCKPT1"

DEFAULT_DIM = 32
DEFAULT_LAYERS = (64, 32)
DEFAULT_K = 3
INIT_STD = 0.1
MARGIN_INIT = 0.5
MARGIN_MAX = 1.0


class GraphEncoder:
    """Symmetric-normalized user-item adjacency with K propagation layers.

    Node order is users first, then items (item ``x`` is node
    ``n_users + x``).
    """

    def __init__(self, users: np.ndarray, items: np.ndarray, n_users: int, n_items: int,
                 n_layers: int = DEFAULT_K):
        self.users = np.asarray(users, dtype=np.int64)
        self.items = np.asarray(items, dtype=np.int64)
        self.n_users = int(n_users)
        self.n_items = int(n_items)
        self.n_layers = int(n_layers)
        self.layer_weights = np.full(self.n_layers + 1, 1.0 / (self.n_layers + 1))
        n = self.n_users + self.n_items
        du = np.bincount(self.users, minlength=self.n_users).astype(np.float64)
        di = np.bincount(self.items, minlength=self.n_items).astype(np.float64)
        val = 1.0 / np.sqrt(du[self.users] * di[self.items]) if self.users.size else np.zeros(0)
        rows = np.concatenate([self.users, self.n_users + self.items])
        cols = np.concatenate([self.n_users + self.items, self.users])
        self.adj = sp.csr_matrix((np.concatenate([val, val]), (rows, cols)), shape=(n, n))

    @classmethod
    def from_interactions(cls, train: InteractionSet, n_layers: int = DEFAULT_K) -> GraphEncoder:
        if train.role != "train":
            raise ValueError(f"graph encoder must be built from the train split, got role {train.role!r}")
        u, x = train.pairs()
        return cls(u, x, train.n_users, train.n_items, n_layers)

    def propagate(self, emb: np.ndarray) -> np.ndarray:
        """Layer-combined embeddings: sum_k w_k * A^k E."""
        out = self.layer_weights[0] * emb
        cur = emb
        for k in range(1, self.n_layers + 1):
            cur = self.adj @ cur
            out = out + self.layer_weights[k] * cur
        return out

    # the normalized adjacency is symmetric, so the adjoint is the same map
    backpropagate = propagate

    def dense(self) -> np.ndarray:
        return self.adj.toarray()


@dataclass(eq=False)
class ModelState:
    kind: str
    params: dict[str, np.ndarray]
    graph: GraphEncoder | None = None
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return int(self.params["P"].shape[1])

    @property
    def n_users(self) -> int:
        return int(self.params["P"].shape[0])

    @property
    def n_items(self) -> int:
        return int(self.params["Q"].shape[0])

    @property
    def has_boundary(self) -> bool:
        return "W" in self.params

    @property
    def mlp_depth(self) -> int:
        return sum(1 for k in self.params if k.startswith("mlp.w"))

    def copy(self) -> ModelState:
        return ModelState(self.kind, {k: v.copy() for k, v in self.params.items()},
                          self.graph, self.seed, dict(self.meta))


def init_state(kind: str, n_users: int, n_items: int, d: int = DEFAULT_DIM, seed: int = 0, *,
               boundary: bool = True, margins: bool = False, layers=DEFAULT_LAYERS,
               graph: GraphEncoder | None = None) -> ModelState:
    """Fresh parameters: N(0, 0.1^2) embeddings, zero boundary head, fan-in
    uniform MLP weights, margins at 0.5."""
    if kind not in KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    if kind == "gcn" and graph is None:
        raise ValueError("gcn scorer needs a GraphEncoder")
    rng = np.random.default_rng(seed)
    params = {
        "P": rng.normal(0.0, INIT_STD, (n_users, d)),
        "Q": rng.normal(0.0, INIT_STD, (n_items, d)),
    }
    if kind == "mlp":
        widths = [2 * d, *layers, 1]
        for i, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
            bound = 1.0 / np.sqrt(fi)
            params[f"mlp.w{i}"] = rng.uniform(-bound, bound, (fi, fo))
            params[f"mlp.b{i}"] = rng.uniform(-bound, bound, fo)
    if boundary:
        params["W"] = np.zeros(d)
    if margins:
        params["margins"] = np.full((n_users, 2), MARGIN_INIT)
    meta = {"layers": list(layers) if kind == "mlp" else []}
    return ModelState(kind, params, graph, int(seed), meta)


# -- gradient buffers ------------------------------------------------------


class Grads:
    """Accumulates parameter gradients for one state.

    Row-sparse tables get a zeroed full-size buffer plus a touched-row mask;
    :meth:`rows` returns only the touched rows.  Dense tensors are summed
    directly.
    """

    def __init__(self, state: ModelState):
        self._shapes = {k: v.shape for k, v in state.params.items()}
        self.buffers: dict[str, np.ndarray] = {}
        self.touched: dict[str, np.ndarray] = {}
        self.dense: dict[str, np.ndarray] = {}

    def buffer(self, name: str, idx=None) -> np.ndarray:
        """Full-size buffer for ``name``; marks ``idx`` rows as touched."""
        if name not in self.buffers:
            self.buffers[name] = np.zeros(self._shapes[name])
            self.touched[name] = np.zeros(self._shapes[name][0], dtype=bool)
        if idx is not None:
            self.touched[name][idx] = True
        return self.buffers[name]

    def add_rows(self, name: str, idx, vals) -> None:
        idx = np.asarray(idx, dtype=np.int64).reshape(-1)
        buf = self.buffer(name, idx)
        kernels.scatter_add_rows(buf, idx, np.asarray(vals, dtype=np.float64).reshape(idx.size, -1))

    def add_dense(self, name: str, g) -> None:
        if name in self.dense:
            self.dense[name] = self.dense[name] + g
        else:
            self.dense[name] = np.array(g, dtype=np.float64)

    def sparse_names(self) -> list[str]:
        return list(self.buffers)

    def rows(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name not in self.buffers:
            return np.zeros(0, dtype=np.int64), np.zeros((0, 1))
        rows = np.flatnonzero(self.touched[name])
        return rows, self.buffers[name][rows]

    def to_dense(self, state: ModelState) -> dict[str, np.ndarray]:
        """Full-shape gradient per parameter (zeros where untouched)."""
        out = {k: np.zeros_like(v) for k, v in state.params.items()}
        for name, buf in self.buffers.items():
            out[name] += buf
        for name, g in self.dense.items():
            out[name] += g
        return out


# -- scalar score functions ------------------------------------------------


def score_mf(state: ModelState, u: int, x: int) -> float:
    return float(state.params["P"][u] @ state.params["Q"][x])


def score_metric(state: ModelState, u: int, x: int) -> float:
    diff = state.params["P"][u] - state.params["Q"][x]
    return float(-(diff @ diff))


def score_mlp(state: ModelState, u: int, x: int) -> float:
    return float(mlp_forward(state.params, np.concatenate([state.params["P"][u], state.params["Q"][x]])[None, :])[0][0])


def score_gcn(state: ModelState, u: int, x: int) -> float:
    E = propagated(state)
    return float(E[u] @ E[state.n_users + x])


def boundary(state: ModelState, u: int) -> float:
    if not state.has_boundary:
        raise ValueError("model has no boundary head")
    return float(state.params["W"] @ state.params["P"][u])


# -- batched forward / backward --------------------------------------------


def mlp_forward(params: dict, h0: np.ndarray):
    """Returns ``(scores, activations)``; activations[i] is the input of layer i."""
    n_layers = sum(1 for k in params if k.startswith("mlp.w"))
    acts = [h0]
    h = h0
    for i in range(n_layers):
        z = h @ params[f"mlp.w{i}"] + params[f"mlp.b{i}"]
        if i < n_layers - 1:
            h = np.maximum(z, 0.0)
            acts.append(h)
        else:
            h = z
    return h[:, 0], acts


def propagated(state: ModelState) -> np.ndarray:
    """Stacked user-then-item embeddings after graph propagation."""
    E0 = np.vstack([state.params["P"], state.params["Q"]])
    return state.graph.propagate(E0)


@dataclass
class Forward:
    users: np.ndarray
    items: np.ndarray
    scores: np.ndarray
    cache: dict


def forward(state: ModelState, users, items) -> Forward:
    """Scores for aligned ``users[k], items[k]``."""
    users = np.asarray(users, dtype=np.int64).reshape(-1)
    items = np.asarray(items, dtype=np.int64).reshape(-1)
    P, Q = state.params["P"], state.params["Q"]
    cache: dict = {}
    if state.kind == "mf":
        s = kernels.rowdot(P, Q, users, items)
    elif state.kind == "metric":
        s = kernels.neg_sqdist(P, Q, users, items)
    elif state.kind == "mlp":
        s, acts = mlp_forward(state.params, np.concatenate([P[users], Q[items]], axis=1))
        cache["acts"] = acts
    elif state.kind == "gcn":
        E = propagated(state)
        cache["E"] = E
        s = np.einsum("ij,ij->i", E[users], E[state.n_users + items])
    else:
        raise ValueError(state.kind)
    return Forward(users, items, s, cache)


def backward(state: ModelState, fw: Forward, upstream, grads: Grads) -> Grads:
    """Accumulate ``upstream[k] * d s_k / d theta`` into ``grads``."""
    g = np.asarray(upstream, dtype=np.float64).reshape(-1)
    users, items = fw.users, fw.items
    P, Q = state.params["P"], state.params["Q"]
    if state.kind == "mf":
        kernels.dot_backward(P, Q, users, items, g, grads.buffer("P", users), grads.buffer("Q", items))
    elif state.kind == "metric":
        kernels.sqdist_backward(P, Q, users, items, g, grads.buffer("P", users), grads.buffer("Q", items))
    elif state.kind == "mlp":
        acts = fw.cache["acts"]
        n_layers = len(acts)
        delta = g[:, None]
        for i in range(n_layers - 1, -1, -1):
            grads.add_dense(f"mlp.w{i}", acts[i].T @ delta)
            grads.add_dense(f"mlp.b{i}", delta.sum(axis=0))
            delta = delta @ state.params[f"mlp.w{i}"].T
            if i > 0:
                delta = delta * (acts[i] > 0)
        d = state.d
        grads.add_rows("P", users, delta[:, :d])
        grads.add_rows("Q", items, delta[:, d:])
    elif state.kind == "gcn":
        E = fw.cache["E"]
        nu = state.n_users
        gE = np.zeros_like(E)
        kernels.scatter_add_rows(gE, users, g[:, None] * E[nu + items])
        kernels.scatter_add_rows(gE, nu + items, g[:, None] * E[users])
        g0 = state.graph.backpropagate(gE)
        ru = np.flatnonzero(np.any(g0[:nu] != 0.0, axis=1))
        ri = np.flatnonzero(np.any(g0[nu:] != 0.0, axis=1))
        grads.buffer("P", ru)[ru] += g0[ru]
        grads.buffer("Q", ri)[ri] += g0[nu + ri]
    else:
        raise ValueError(state.kind)
    return grads


def score_pairs(state: ModelState, users, items) -> np.ndarray:
    return forward(state, users, items).scores


def score_matrix(state: ModelState, users, items) -> np.ndarray:
    """Scores for ``users[i]`` against each row ``items[i, :]``."""
    items = np.asarray(items, dtype=np.int64)
    users = np.asarray(users, dtype=np.int64)
    if state.kind == "gcn":
        E = propagated(state)
        return np.einsum("id,icd->ic", E[users], E[state.n_users + items])
    rep = np.repeat(users, items.shape[1])
    return score_pairs(state, rep, items.reshape(-1)).reshape(items.shape)


def score_all_items(state: ModelState, users) -> np.ndarray:
    """Full-catalog score matrix for the given users."""
    users = np.asarray(users, dtype=np.int64)
    P, Q = state.params["P"], state.params["Q"]
    if state.kind == "mf":
        return P[users] @ Q.T
    if state.kind == "metric":
        pu = P[users]
        return -((pu * pu).sum(1)[:, None] - 2.0 * pu @ Q.T + (Q * Q).sum(1)[None, :])
    if state.kind == "gcn":
        E = propagated(state)
        return E[users] @ E[state.n_users:].T
    items = np.broadcast_to(np.arange(state.n_items), (users.size, state.n_items))
    return score_matrix(state, users, items)


def boundary_scores(state: ModelState, users) -> np.ndarray:
    if not state.has_boundary:
        raise ValueError("model has no boundary head")
    return state.params["P"][np.asarray(users, dtype=np.int64)] @ state.params["W"]


def boundary_backward(state: ModelState, users, upstream, grads: Grads) -> Grads:
    users = np.asarray(users, dtype=np.int64).reshape(-1)
    g = np.asarray(upstream, dtype=np.float64).reshape(-1)
    P, W = state.params["P"], state.params["W"]
    grads.add_rows("P", users, g[:, None] * W[None, :])
    grads.add_dense("W", g @ P[users])
    return grads


def item_metric(state: ModelState, a, b) -> np.ndarray:
    """Negated squared distance between item embeddings ``Q_a`` and ``Q_b``."""
    Q = state.params["Q"]
    return kernels.neg_sqdist(Q, Q, a, b)


def item_metric_backward(state: ModelState, a, b, upstream, grads: Grads) -> Grads:
    a = np.asarray(a, dtype=np.int64).reshape(-1)
    b = np.asarray(b, dtype=np.int64).reshape(-1)
    Q = state.params["Q"]
    buf = grads.buffer("Q", a)
    grads.buffer("Q", b)
    kernels.sqdist_backward(Q, Q, a, b, upstream, buf, buf)
    return grads


def grad_score(state: ModelState, u: int, x: int, upstream: float = 1.0,
               grads: Grads | None = None) -> Grads:
    """Gradient of ``upstream * s(u, x)`` w.r.t. the parameters it touches."""
    grads = Grads(state) if grads is None else grads
    fw = forward(state, [u], [x])
    return backward(state, fw, [upstream], grads)


# -- checkpoints -----------------------------------------------------------


def checkpoint_bytes(state: ModelState) -> bytes:
    blocks = [(k, v.astype("<f8")) for k, v in state.params.items()]
    if state.graph is not None:
        blocks.append(("graph.users", state.graph.users.astype("<i8")))
        blocks.append(("graph.items", state.graph.items.astype("<i8")))
    header = {
        "kind": state.kind, "d": state.d, "n_users": state.n_users, "n_items": state.n_items,
        "K": state.graph.n_layers if state.graph is not None else 0, "seed": state.seed,
        "meta": state.meta,
        "blocks": [{"name": k, "shape": list(v.shape), "dtype": v.dtype.str} for k, v in blocks],
    }
    hb = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", len(hb)))
    buf.write(hb)
    for _, v in blocks:
        buf.write(np.ascontiguousarray(v).tobytes())
    return buf.getvalue()


def save_checkpoint(state: ModelState, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(state))


def load_checkpoint(path) -> ModelState:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a uibrec checkpoint")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + hlen])
    off = 12 + hlen
    params: dict[str, np.ndarray] = {}
    extra: dict[str, np.ndarray] = {}
    for blk in header["blocks"]:
        dt = np.dtype(blk["dtype"])
        n = int(np.prod(blk["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype=dt, count=n, offset=off).reshape(blk["shape"])
        off += n * dt.itemsize
        (extra if blk["name"].startswith("graph.") else params)[blk["name"]] = arr.astype(dt.newbyteorder("="))
    graph = None
    if header["kind"] == "gcn":
        graph = GraphEncoder(extra["graph.users"], extra["graph.items"],
                             header["n_users"], header["n_items"], header["K"])
    return ModelState(header["kind"], params, graph, header["seed"], header.get("meta", {}))
