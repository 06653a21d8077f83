"""The full model: scene encoding, proposal stage, anchor selection and refinement."""

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from config import RunConfig
from encoder import SceneContext, SceneEncoder, prepare_scene
from evalmetrics import Forecast
from geometry import to_global
from interaction import ProposalStage, StageQueries
from models import Scenario
from numerics import DenseArray, ParamStore, softmax
from refine import AnchorSelector, AnchorSet, RefineOutput, RefineStage, das_select_anchor, refine_trajectories

logger = logging.getLogger(__name__)


@dataclass
class PredictionSet:
    queries: StageQueries
    p_pro: DenseArray
    anchors: AnchorSet
    refined: RefineOutput

    @property
    def p_fin(self) -> DenseArray:
        return self.refined.p_fin

    @property
    def logits(self) -> DenseArray:
        return self.refined.logits


class ILNet:
    """Two-stage multi-agent trajectory predictor.

    Every learnable array lives in ``self.params``; parameter names are
    prefixed by the submodule that owns them (``encoder.``, ``interaction.``,
    ``refine.``).
    """

    def __init__(self, config: RunConfig, seed: Optional[int] = None):
        self.config = config
        self.params = ParamStore()
        rng = np.random.default_rng(config.seed if seed is None else seed)
        self.encoder = SceneEncoder(self.params, config, rng)
        self.proposal = ProposalStage(self.params, config, rng)
        self.selector = AnchorSelector(self.params, config, rng)
        self.refiner = RefineStage(self.params, config, rng)
        logger.debug(f"ILNet built with {self.parameter_count()} parameters "
                     f"({self.parameter_count('refine.das')} in anchor selection)")

    def prepare(self, scenario: Scenario) -> SceneContext:
        return prepare_scene(scenario, self.config)

    def forward(self, ctx: SceneContext) -> PredictionSet:
        emb = self.encoder.encode(ctx)
        q = self.encoder.init_mode_queries(emb.agent_emb)
        q_sa = self.encoder.agent_map_attention(q, emb)
        queries, p_pro = self.proposal(q, q_sa, emb)
        anchors = das_select_anchor(self.selector, ctx, p_pro)
        refined = refine_trajectories(self.refiner, ctx, p_pro, anchors, queries.e_q, emb.map_emb, emb.edges)
        return PredictionSet(queries, p_pro, anchors, refined)

    def forecast(self, scene: Union[Scenario, SceneContext]) -> Forecast:
        """Predictions made at the last history step, in local and global frames"""
        ctx = scene if isinstance(scene, SceneContext) else self.prepare(scene)
        out = self.forward(ctx)
        t = ctx.history_steps - 1
        origin = ctx.frame_xy[:, t]
        heading = ctx.frame_heading[:, t]
        finals = out.p_fin.data[:, t]
        proposals = out.p_pro.data[:, t]
        anchors = out.anchors.anchor_xy.data[:, t]

        def to_world(points: np.ndarray, lead: int) -> np.ndarray:
            return to_global(points, origin.reshape((-1,) + (1,) * lead + (2,)), heading.reshape((-1,) + (1,) * lead))

        return Forecast(
            scenario_id=ctx.scenario_id,
            agent_ids=list(ctx.agent_ids),
            focal_indices=list(ctx.focal_indices),
            scored=ctx.observed[:, t].copy(),
            origin_xy=origin.copy(),
            origin_heading=heading.copy(),
            finals_local=finals.copy(),
            finals_global=to_world(finals, 2),
            proposals_global=to_world(proposals, 2),
            anchors_global=to_world(anchors, 1),
            frac_index=out.anchors.frac_index.data[:, t].copy(),
            probs=softmax(out.logits.data[:, t], axis=-1).data,
        )

    def parameter_count(self, prefix: str = "") -> int:
        return self.params.num_parameters(prefix)
