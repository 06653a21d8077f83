"""Proposal stage: ego temporal, agent future and agent history attention,
factorized attention rounds and the proposal decoder."""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from config import RunConfig
from encoder import POLAR_EDGE_FEATURES, TEMPORAL_EDGE_FEATURES, EmbeddingSet
from errors import DimensionError
from layers import MLP, EdgeAttention, EdgeSet
from numerics import DenseArray, ParamStore, as_dense, reshape

logger = logging.getLogger(__name__)


@dataclass
class StageQueries:
    q_sa: DenseArray
    q_ta: DenseArray
    q_fa: DenseArray
    q_ia: DenseArray
    e_q: DenseArray


def fuse_queries(q_sa: DenseArray, q_ta: DenseArray, q_ia: DenseArray) -> DenseArray:
    """E_q = q_sa + q_ta + q_ia"""
    q_sa, q_ta, q_ia = as_dense(q_sa), as_dense(q_ta), as_dense(q_ia)
    if not q_sa.shape == q_ta.shape == q_ia.shape:
        raise DimensionError(f"cannot fuse queries of shapes {q_sa.shape}, {q_ta.shape}, {q_ia.shape}")
    return q_sa + q_ta + q_ia


def _over_rows(q: DenseArray, fn: Callable[[DenseArray], DenseArray]) -> DenseArray:
    """Apply a row-wise attention to [N, H, K, D] queries"""
    n, h, k, d = q.shape
    return reshape(fn(reshape(q, (n * h * k, d))), (n, h, k, d))


class FactorizedRound:
    """Agent attention, historical prediction attention, then mode attention"""

    def __init__(self, store: ParamStore, name: str, dim: int, num_heads: int, rng: np.random.Generator):
        self.agent = EdgeAttention(store, f"{name}.agent", dim, num_heads, POLAR_EDGE_FEATURES, rng,
                                   self_attention=True)
        self.history = EdgeAttention(store, f"{name}.history", dim, num_heads, TEMPORAL_EDGE_FEATURES, rng,
                                     self_attention=True)
        self.mode = EdgeAttention(store, f"{name}.mode", dim, num_heads, 0, rng, self_attention=True)

    def __call__(self, rows: DenseArray, edges: Dict[str, EdgeSet]) -> DenseArray:
        rows = self.agent(rows, None, edges["agent"])
        rows = self.history(rows, None, edges["prediction_history"])
        return self.mode(rows, None, edges["mode"])


class ProposalStage:
    """Turns agent-map queries and initial mode queries into proposals [N, H, K, F, 2]"""

    def __init__(self, store: ParamStore, config: RunConfig, rng: np.random.Generator):
        d, heads = config.hidden_dim, config.num_heads
        self.future_steps = config.future_steps
        self.il_order = config.il_order
        self.temporal = EdgeAttention(store, "interaction.temporal", d, heads, TEMPORAL_EDGE_FEATURES, rng)
        self.future: Optional[EdgeAttention] = None
        self.history: Optional[EdgeAttention] = None
        if not config.disable_fa:
            self.future = EdgeAttention(store, "interaction.future", d, heads, POLAR_EDGE_FEATURES, rng)
        if not config.disable_ha:
            self.history = EdgeAttention(store, "interaction.history", d, heads, POLAR_EDGE_FEATURES, rng)
        self.rounds: List[FactorizedRound] = [
            FactorizedRound(store, f"interaction.factorized.{i}", d, heads, rng)
            for i in range(config.num_recurrent)
        ]
        self.decoder = MLP(store, "interaction.decoder", d, d, 2 * config.future_steps, rng)

    def ego_temporal_attention(self, q: DenseArray, emb: EmbeddingSet) -> DenseArray:
        sources = emb.agent_rows()
        return _over_rows(q, lambda rows: self.temporal(rows, sources, emb.edges["temporal"]))

    def agent_future_attention(self, q: DenseArray, emb: EmbeddingSet) -> DenseArray:
        if self.future is None:
            return q
        sources = emb.agent_rows()
        return _over_rows(q, lambda rows: self.future(rows, sources, emb.edges["future"]))

    def agent_history_attention(self, q: DenseArray, emb: EmbeddingSet) -> DenseArray:
        if self.history is None:
            return q
        sources = emb.agent_rows()
        return _over_rows(q, lambda rows: self.history(rows, sources, emb.edges["history"]))

    def inverse_learning(self, q_ta: DenseArray, emb: EmbeddingSet):
        """(q_fa, q_ia); the inverse order runs future then history, the forward order swaps them"""
        if self.future is None and self.history is None:
            zeros = DenseArray(np.zeros(q_ta.shape))
            return q_ta, zeros
        if self.il_order == "inverse":
            q_fa = self.agent_future_attention(q_ta, emb)
            return q_fa, self.agent_history_attention(q_fa, emb)
        q_ha = self.agent_history_attention(q_ta, emb)
        q_fa = self.agent_future_attention(q_ha, emb)
        return q_fa, q_fa

    def factorized_attention(self, e_q: DenseArray, emb: EmbeddingSet) -> DenseArray:
        def run(rows):
            for round_ in self.rounds:
                rows = round_(rows, emb.edges)
            return rows

        return _over_rows(e_q, run)

    def decode_proposal(self, e_q: DenseArray) -> DenseArray:
        """Local-frame offsets [N, H, K, F, 2] from each agent's pose at its timestamp"""
        n, h, k, _ = e_q.shape
        return reshape(self.decoder(e_q), (n, h, k, self.future_steps, 2))

    def __call__(self, q: DenseArray, q_sa: DenseArray, emb: EmbeddingSet):
        q_ta = self.ego_temporal_attention(q, emb)
        q_fa, q_ia = self.inverse_learning(q_ta, emb)
        e_q = self.factorized_attention(fuse_queries(q_sa, q_ta, q_ia), emb)
        return StageQueries(q_sa, q_ta, q_fa, q_ia, e_q), self.decode_proposal(e_q)
