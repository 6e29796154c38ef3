"""Graph capsule network: multi-head attention pooling over a grid of primary capsules.

Each of the L groups of stem feature maps is one head: a K x K grid graph
whose nodes are the transformed capsules of that group. Per head,

    Att = softmax(A X W)        (K^2, M), normalised over nodes
    S   = Att^T X               (M, D_out)

and the output capsules are squash(mean over heads of S). The averaged
attention column of the predicted class is the built-in explanation.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .capsnet import Decoder, _CapsuleBase, capsule_lengths, reconstruct
from .nn import component_rng


def build_adjacency(K):
    """Symmetric, row-stochastic adjacency of the 4-neighbour K x K grid with self-loops.

    Weights follow the Metropolis rule: an edge (i, j) gets 1/max(deg_i, deg_j)
    with degrees counting the self-loop, and the diagonal takes the remainder.
    """
    if K < 1:
        raise ValueError("grid size must be >= 1")
    n = K * K
    adj = grid_graph(K)
    deg = adj.sum(axis=1)
    A = np.zeros((n, n))
    rows, cols = np.nonzero(adj)
    for i, j in zip(rows, cols):
        if i != j:
            A[i, j] = 1.0 / max(deg[i], deg[j])
    A[np.diag_indices(n)] = 1.0 - A.sum(axis=1)
    return A


def grid_graph(K):
    """0/1 adjacency of the 4-neighbour grid including self-loops (unnormalised)."""
    n = K * K
    adj = np.eye(n)
    for r in range(K):
        for c in range(K):
            i = r * K + c
            if c + 1 < K:
                adj[i, i + 1] = adj[i + 1, i] = 1.0
            if r + 1 < K:
                adj[i, i + K] = adj[i + K, i] = 1.0
    return adj


def head_attention(X, A, W, axis="nodes"):
    """softmax(A X W) for node features X (B, n, D), adjacency A (n, n), W (D, M).

    ``axis="nodes"`` normalises each class column over the nodes; ``"classes"``
    normalises each node row over classes.
    """
    if X.ndim != 3 or A.shape != (X.shape[1], X.shape[1]) or W.ndim != 2 or W.shape[0] != X.shape[2]:
        raise T.ShapeError(f"head_attention: X {X.shape}, A {A.shape}, W {W.shape} do not conform")
    A = T.as_tensor(A)
    AX = T.einsum("pq,bqd->bpd", A, X)
    logits = T.einsum("bpd,dm->bpm", AX, W)
    return T.softmax(logits, axis=1 if axis == "nodes" else 2)


def graph_pool(X, att):
    """S = Att^T X: (B, M, D), each class row a convex combination of node features."""
    if att.ndim != 3 or X.ndim != 3 or att.shape[:2] != X.shape[:2]:
        raise T.ShapeError(f"graph_pool: attention {att.shape} does not fit nodes {X.shape}")
    return T.einsum("bnm,bnd->bmd", att, X)


def builtin_explanation(atts, predicted):
    """Average the heads' attention and return the predicted class column as a K x K map.

    ``atts`` is (L, n, M) for one image or a list of L (n, M) arrays.
    """
    atts = np.asarray([np.asarray(a.data if isinstance(a, T.Tensor) else a) for a in atts])
    L, n, M = atts.shape
    if not 0 <= predicted < M:
        raise ValueError(f"class {predicted} out of range for {M} classes")
    K = int(round(np.sqrt(n)))
    if K * K != n:
        raise ValueError(f"{n} nodes do not form a square grid")
    E = atts.mean(axis=0)
    return E[:, predicted].reshape(K, K)


@dataclass(frozen=True)
class GraCapsConfig:
    input_shape: tuple = (1, 28, 28)
    conv1: tuple = (16, 5, 1)
    conv2: tuple = (32, 5, 2)
    d_in: int = 8
    d_out: int = 16
    num_classes: int = 3
    attention_axis: str = "nodes"
    shared_attention: bool = False  # one W for all heads instead of one per head
    decoder_hidden: int = 512
    recon_weight: float = 0.0005
    reconstruction: bool = True

    def grid(self):
        C, H, W = self.input_shape
        for f, k, s in (self.conv1, self.conv2):
            H, W = (H - k) // s + 1, (W - k) // s + 1
            C = f
        if C % self.d_in:
            raise ValueError(f"{C} stem channels not divisible by d_in={self.d_in}")
        if H != W:
            raise ValueError(f"primary grid {H}x{W} is not square")
        return C // self.d_in, H  # heads L, grid side K


def gracaps_pool(u, transform, att_w, A, attention_axis="nodes", return_attention=False):
    """Transformed capsules per head -> attention pooling -> squash of the head average.

    u: (B, L, n, D_in) primary capsules grouped by head; transform: (L, D_out, D_in);
    att_w: (L, D_out, M) or (D_out, M) when shared.
    """
    B, L, n, _ = u.shape
    if transform.shape[0] != L:
        raise T.ShapeError(f"{transform.shape[0]} head transforms for {L} heads")
    X = T.einsum("blni,ldi->blnd", u, transform)
    S_sum = None
    atts = []
    for l in range(L):
        Xl = X[:, l]
        Wl = att_w if att_w.ndim == 2 else att_w[l]
        att = head_attention(Xl, A, Wl, attention_axis)
        atts.append(att)
        S = graph_pool(Xl, att)
        S_sum = S if S_sum is None else S_sum + S
    V = T.squash(S_sum * (1.0 / L))
    if return_attention:
        return V, np.stack([a.data for a in atts], axis=1)  # (B, L, n, M)
    return V


class GraCapsNet(_CapsuleBase):
    kind = "gracapsnet"

    def __init__(self, config=GraCapsConfig(), seed=0):
        super().__init__(config, seed, "gracapsnet")
        L, K = config.grid()
        self.L, self.K = L, K
        self.A = build_adjacency(K)
        rng = component_rng(seed, "gracapsnet.heads")
        self.transform = self.param("heads.transform", rng.standard_normal((L, config.d_out, config.d_in)) * np.sqrt(1.0 / config.d_in))
        shape = (config.d_out, config.num_classes) if config.shared_attention else (L, config.d_out, config.num_classes)
        self.att_w = self.param("heads.att", rng.standard_normal(shape))
        self._add_decoder()

    def transform_params(self):
        return self.transform.size + self.att_w.size

    def grouped_primary(self, x):
        u = self.primary(x)  # (B, L*K*K, D_in), group-major
        B = u.shape[0]
        return T.reshape(u, (B, self.L, self.K * self.K, self.config.d_in))

    def forward(self, x, return_attention=False):
        single = T.as_tensor(x).ndim == 3
        out = gracaps_pool(self.grouped_primary(x), self.transform, self.att_w, self.A,
                           self.config.attention_axis, return_attention)
        V, atts = out if return_attention else (out, None)
        if single:
            V = T.reshape(V, V.shape[1:])
            atts = None if atts is None else atts[0]
        return (V, atts) if return_attention else V

    def explain(self, x):
        """Predicted class and its K x K attention map from the same forward pass."""
        with T.no_grad():
            V, atts = self.forward(T.as_tensor(x), return_attention=True)
        lengths = np.linalg.norm(V.data, axis=-1)
        pred = int(np.argmax(lengths))
        return pred, builtin_explanation(atts, pred)


def gracaps_forward(u, transform, att_w, A, attention_axis="nodes"):
    return gracaps_pool(u, transform, att_w, A, attention_axis)


__all__ = [
    "Decoder", "GraCapsConfig", "GraCapsNet", "build_adjacency", "builtin_explanation",
    "capsule_lengths", "gracaps_forward", "gracaps_pool", "graph_pool", "grid_graph",
    "head_attention", "reconstruct",
]
