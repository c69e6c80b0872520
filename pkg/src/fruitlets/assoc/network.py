"""Attentional graph network for cross-day fruitlet association.

Each detection becomes a node whose initial state fuses an appearance
encoding, a positional encoding, the detector score, and a tag flag.
Alternating rounds of self- and cross-attention let every node integrate
context from its own image and candidates in the other image; projected
descriptors are compared by inner product and normalised into a partial
assignment by Sinkhorn with a learned dustbin.
"""

from dataclasses import dataclass

import numpy as np

from ..nn import MLP, Conv2d, Linear, ParameterStore
from ..tensor import Tensor, concat, matmul, no_grad, relu, softmax, transpose
from .sinkhorn import augment_scores, extract_matches, sinkhorn_log
from .types import ClusterObservation, MatchSet, NetConfig

__all__ = ["AssociationNetwork", "AssociationOutput"]


@dataclass
class AssociationOutput:
    """Forward-pass results for one observation pair."""

    log_pbar: Tensor  # (M+1, N+1) log assignment matrix
    scores: Tensor  # (M, N) descriptor similarities

    @property
    def probabilities(self) -> np.ndarray:
        """Assignment probabilities with the dustbins stripped."""
        return np.exp(self.log_pbar.data[:-1, :-1])


class AssociationNetwork:
    """The matcher; owns its parameters through a :class:`ParameterStore`.

    Build with a config and seed, or hand in an existing store (e.g. to
    share parameters).  ``store.load(path)`` restores a checkpoint in
    place.
    """

    def __init__(self, config: NetConfig, seed: int = 0, store: ParameterStore | None = None):
        self.config = config
        self.store = store if store is not None else ParameterStore(seed)
        d = config.feature_dim
        f = config.node_dim
        dc = config.d_enc_channels
        pc = config.p_enc_channels

        self.d_conv1 = Conv2d(self.store, "d_enc.conv1", config.visual_channels, dc[0], 3)
        self.d_conv2 = Conv2d(self.store, "d_enc.conv2", dc[0], dc[1], 3)
        self.d_proj = Linear(self.store, "d_enc.proj", dc[1] * 3 * 3, d)

        self.p_convs = [
            Conv2d(self.store, f"p_enc.conv{i + 1}", cin, cout, 3, stride=2, padding=1)
            for i, (cin, cout) in enumerate(zip((4,) + tuple(pc[:-1]), pc))
        ]
        self.p_proj = Linear(self.store, "p_enc.proj", pc[-1] * 4 * 4, d)

        self.attn_q = []
        self.attn_k = []
        self.attn_v = []
        self.attn_merge = []
        self.update_mlps = []
        for layer in range(config.num_layers):
            self.attn_q.append(Linear(self.store, f"gnn.{layer}.q", f, d))
            self.attn_k.append(Linear(self.store, f"gnn.{layer}.k", f, d))
            self.attn_v.append(Linear(self.store, f"gnn.{layer}.v", f, d))
            self.attn_merge.append(Linear(self.store, f"gnn.{layer}.merge", d, d))
            self.update_mlps.append(MLP(self.store, f"gnn.{layer}.mlp", [f + d, f + d, f]))

        self.final = Linear(self.store, "final", f, f)
        self.dustbin = self.store.full("dustbin", (1,), 1.0)

    # -- pieces ----------------------------------------------------------

    def encode_nodes(self, obs: ClusterObservation) -> Tensor:
        """Initial node states: appearance + position, with score and tag
        flag appended as extra channels."""
        vis = np.stack([n.visual for n in obs.nodes])
        if vis.shape[1] != self.config.visual_channels:
            raise ValueError(
                f"visual grids have {vis.shape[1]} channels, config expects {self.config.visual_channels}"
            )
        pos = np.stack([n.positional for n in obs.nodes])

        dv = relu(self.d_conv1(Tensor(vis)))
        dv = relu(self.d_conv2(dv))
        dv = self.d_proj(dv.reshape((len(obs.nodes), dv.data[0].size)))

        pv = Tensor(pos)
        for conv in self.p_convs:
            pv = relu(conv(pv))
        pv = self.p_proj(pv.reshape((len(obs.nodes), pv.data[0].size)))

        extras = np.array([[n.score, 1.0 if n.is_tag else 0.0] for n in obs.nodes])
        return concat([dv + pv, Tensor(extras)], axis=1)

    def _attend(self, layer: int, queries: Tensor, source: Tensor) -> Tensor:
        """Multi-head scaled dot-product attention message for each query node."""
        heads = self.config.num_heads
        d = self.config.feature_dim
        dh = d // heads
        nq = queries.shape[0]
        ns = source.shape[0]
        q = self.attn_q[layer](queries).reshape((nq, heads, dh)).transpose((1, 0, 2))
        k = self.attn_k[layer](source).reshape((ns, heads, dh)).transpose((1, 2, 0))
        v = self.attn_v[layer](source).reshape((ns, heads, dh)).transpose((1, 0, 2))
        att = softmax(matmul(q, k) * Tensor(1.0 / np.sqrt(dh)), axis=-1)
        msg = matmul(att, v).transpose((1, 0, 2)).reshape((nq, d))
        return self.attn_merge[layer](msg)

    def propagate(self, xa: Tensor, xb: Tensor) -> tuple:
        """Run the alternating self/cross attention stack (self first)."""
        for layer in range(self.config.num_layers):
            if layer % 2 == 0:
                ma = self._attend(layer, xa, xa)
                mb = self._attend(layer, xb, xb)
            else:
                ma = self._attend(layer, xa, xb)
                mb = self._attend(layer, xb, xa)
            xa = xa + self.update_mlps[layer](concat([xa, ma], axis=1))
            xb = xb + self.update_mlps[layer](concat([xb, mb], axis=1))
        return xa, xb

    # -- full pass -------------------------------------------------------

    def forward(self, obs_a: ClusterObservation, obs_b: ClusterObservation) -> AssociationOutput:
        """Log assignment matrix for a pair of observations."""
        xa = self.encode_nodes(obs_a)
        xb = self.encode_nodes(obs_b)
        xa, xb = self.propagate(xa, xb)
        fa = self.final(xa)
        fb = self.final(xb)
        scores = matmul(fa, transpose(fb))
        sbar = augment_scores(scores, self.dustbin).check_finite("association scores")
        log_pbar = sinkhorn_log(sbar, self.config.sinkhorn_iters)
        return AssociationOutput(log_pbar=log_pbar, scores=scores)

    def match(
        self,
        obs_a: ClusterObservation,
        obs_b: ClusterObservation,
        threshold: float = 0.2,
    ) -> MatchSet:
        """Inference: predicted matches between clustered fruitlets."""
        with no_grad():
            out = self.forward(obs_a, obs_b)
        return extract_matches(
            out.probabilities,
            threshold,
            obs_a.is_cluster_flags,
            obs_b.is_cluster_flags,
        )
