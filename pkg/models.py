from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, root_validator, validator

SCENARIO_FORMAT_VERSION = 1
MANIFEST_FORMAT_VERSION = 1


class ScenarioKind(str, Enum):
    """Synthetic scenario families"""
    FOLLOW = "follow"
    INTERSECTION = "intersection"
    MERGE = "merge"
    CURVE = "curve"


class AgentCategory(str, Enum):
    VEHICLE = "vehicle"
    PEDESTRIAN = "pedestrian"
    CYCLIST = "cyclist"


class PolylineKind(str, Enum):
    CENTERLINE = "centerline"
    LEFT_BOUNDARY = "left_boundary"
    RIGHT_BOUNDARY = "right_boundary"


class LaneRelation(str, Enum):
    PREDECESSOR = "predecessor"
    SUCCESSOR = "successor"
    NEIGHBOR = "neighbor"


CATEGORY_CODES = {category: code for code, category in enumerate(AgentCategory)}
POLYLINE_CODES = {kind: code for code, kind in enumerate(PolylineKind)}
RELATION_CODES = {relation: code for code, relation in enumerate(LaneRelation)}

METRIC_KEYS = ("min_ade", "min_fde", "mr", "brier_min_fde", "min_joint_ade", "min_joint_fde",
               "rf", "dao", "dac", "aae")


class AgentState(BaseModel):
    """One timestamped state of an agent"""
    x: float
    y: float
    heading: float
    speed: float = Field(ge=0.0)
    velocity_dir: float
    observed: bool = True

    class Config:
        extra = "forbid"


class AgentTrack(BaseModel):
    """History and future states of one agent"""
    id: int
    category: AgentCategory = AgentCategory.VEHICLE
    length: float = Field(gt=0.0)
    width: float = Field(gt=0.0)
    states: List[AgentState]

    class Config:
        extra = "forbid"


class Polyline(BaseModel):
    kind: PolylineKind
    points: List[Tuple[float, float]]

    class Config:
        extra = "forbid"

    @validator("points")
    def _at_least_two(cls, points):
        if len(points) < 2:
            raise ValueError("a polyline needs at least 2 points")
        return points


class LaneConnection(BaseModel):
    target: int
    relation: LaneRelation
    hops: int = Field(1, ge=1)

    class Config:
        extra = "forbid"


class LaneSegment(BaseModel):
    id: int
    polylines: List[Polyline] = Field(default_factory=list)
    connections: List[LaneConnection] = Field(default_factory=list)

    class Config:
        extra = "forbid"

    def centerline(self) -> Optional[Polyline]:
        for polyline in self.polylines:
            if polyline.kind == PolylineKind.CENTERLINE:
                return polyline
        return None

    def boundary(self, kind: PolylineKind) -> Optional[Polyline]:
        for polyline in self.polylines:
            if polyline.kind == kind:
                return polyline
        return None


class LaneGraph(BaseModel):
    """Lane segments with typed polylines and connectivity"""
    segments: List[LaneSegment] = Field(default_factory=list)

    class Config:
        extra = "forbid"

    @root_validator(skip_on_failure=True)
    def _check_references(cls, values):
        ids = [segment.id for segment in values["segments"]]
        if len(set(ids)) != len(ids):
            raise ValueError("lane segment ids must be unique")
        known = set(ids)
        for segment in values["segments"]:
            for connection in segment.connections:
                if connection.target not in known:
                    raise ValueError(f"segment {segment.id} connects to unknown segment {connection.target}")
        return values

    def centerline_problems(self) -> List[str]:
        """Segments violating the one-centerline rule"""
        problems = []
        for segment in self.segments:
            count = sum(1 for p in segment.polylines if p.kind == PolylineKind.CENTERLINE)
            if not segment.polylines:
                problems.append(f"segment {segment.id} has no polylines")
            elif count != 1:
                problems.append(f"segment {segment.id} has {count} centerlines")
        return problems


class Scenario(BaseModel):
    """Agents' timestamped states, lane graph and history/future split"""
    format_version: int = SCENARIO_FORMAT_VERSION
    id: str
    kind: Optional[ScenarioKind] = None
    sample_rate_hz: float = Field(gt=0.0)
    history_steps: int = Field(ge=1)
    future_steps: int = Field(ge=1)
    agents: List[AgentTrack]
    map: LaneGraph = Field(default_factory=LaneGraph)
    focal_ids: List[int]

    class Config:
        extra = "forbid"

    @root_validator(skip_on_failure=True)
    def _check_tracks(cls, values):
        agents = values["agents"]
        if not agents:
            raise ValueError("a scenario needs at least one agent")
        ids = [agent.id for agent in agents]
        if len(set(ids)) != len(ids):
            raise ValueError("agent ids must be unique")
        total = values["history_steps"] + values["future_steps"]
        for agent in agents:
            if len(agent.states) != total:
                raise ValueError(f"agent {agent.id} has {len(agent.states)} states, expected {total}")
            if not all(state.observed for state in agent.states[values["history_steps"]:]):
                raise ValueError(f"agent {agent.id}: observed flags apply to history slots only")
        if not values["focal_ids"]:
            raise ValueError("focal_ids must not be empty")
        missing = sorted(set(values["focal_ids"]) - set(ids))
        if missing:
            raise ValueError(f"focal ids {missing} are not agents of the scenario")
        return values

    @property
    def num_agents(self) -> int:
        return len(self.agents)

    @property
    def dt(self) -> float:
        return 1.0 / self.sample_rate_hz

    def agent_index(self, agent_id: int) -> int:
        for index, agent in enumerate(self.agents):
            if agent.id == agent_id:
                return index
        raise KeyError(agent_id)

    def positions(self) -> np.ndarray:
        """[N, H+F, 2] global positions"""
        return np.array([[(s.x, s.y) for s in agent.states] for agent in self.agents], dtype=np.float64)

    def headings(self) -> np.ndarray:
        return np.array([[s.heading for s in agent.states] for agent in self.agents], dtype=np.float64)

    def speeds(self) -> np.ndarray:
        return np.array([[s.speed for s in agent.states] for agent in self.agents], dtype=np.float64)

    def velocity_dirs(self) -> np.ndarray:
        return np.array([[s.velocity_dir for s in agent.states] for agent in self.agents], dtype=np.float64)

    def observed_mask(self) -> np.ndarray:
        """[N, H] observed flags of the history slots"""
        h = self.history_steps
        return np.array([[s.observed for s in agent.states[:h]] for agent in self.agents], dtype=bool)


class SplitManifest(BaseModel):
    """Index of a generated dataset"""
    format_version: int = MANIFEST_FORMAT_VERSION
    seed: int
    kind_mix: Dict[str, float]
    sample_rate_hz: float
    history_steps: int
    future_steps: int
    train: List[str]
    val: List[str]

    class Config:
        extra = "forbid"

    @root_validator(skip_on_failure=True)
    def _disjoint(cls, values):
        overlap = set(values["train"]) & set(values["val"])
        if overlap:
            raise ValueError(f"train and val share files: {sorted(overlap)[:3]}")
        return values


class MetricReport(BaseModel):
    """Aggregated evaluation metrics with counts and breakdowns"""
    task: str
    split: str = "val"
    min_ade: float = 0.0
    min_fde: float = 0.0
    mr: float = 0.0
    brier_min_fde: float = 0.0
    min_joint_ade: float = 0.0
    min_joint_fde: float = 0.0
    rf: float = 1.0
    dao: float = 0.0
    dac: float = 0.0
    aae: float = 0.0
    num_scenarios: int = 0
    num_focal_agents: int = 0
    num_joint_agents: int = 0
    num_aae_pairs: int = 0
    mask_ratio: float = 0.0
    challenging: bool = False
    parameter_count: Optional[int] = None
    by_kind: Dict[str, Dict[str, float]] = Field(default_factory=dict)
    by_alpha: Dict[str, Dict[str, float]] = Field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"task: {self.task}  split: {self.split}  scenarios: {self.num_scenarios}  "
                 f"focal agents: {self.num_focal_agents}  joint agents: {self.num_joint_agents}"]
        if self.mask_ratio:
            lines.append(f"history mask ratio: {self.mask_ratio}")
        if self.challenging:
            lines.append("subset: challenging scenarios")
        if self.parameter_count is not None:
            lines.append(f"parameters: {self.parameter_count}")
        for key in METRIC_KEYS:
            lines.append(f"{key:>15}: {getattr(self, key):.6f}")
        for title, table in (("by scenario kind", self.by_kind), ("min_fde by absolute angle", self.by_alpha)):
            if table:
                lines.append(title)
                for name, values in table.items():
                    cells = "  ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in values.items())
                    lines.append(f"  {name}: {cells}")
        return "\n".join(lines) + "\n"


class AgentPrediction(BaseModel):
    """Predictions of one agent at the last history step, global frame"""
    id: int
    probs: List[float]
    finals: List[List[Tuple[float, float]]]
    proposals: List[List[Tuple[float, float]]]
    anchors: Optional[List[Tuple[float, float]]] = None


class PredictionRecord(BaseModel):
    scenario_id: str
    task: str
    agents: List[AgentPrediction]


class EpochRecord(BaseModel):
    """One line of the training loss log"""
    epoch: int
    lr: float
    reg_pro: float
    reg_fin: float
    cls_fin: float
    total: float
    val_min_joint_fde: Optional[float] = None
    val_min_joint_ade: Optional[float] = None
    val_min_fde: Optional[float] = None
    val_min_ade: Optional[float] = None
    selection_metric: Optional[float] = None
    best: bool = False


class AblationRow(BaseModel):
    """A named config delta on the base run"""
    name: str
    changes: Dict[str, Any] = Field(default_factory=dict)
    mask_ratio: Optional[float] = None
    source: Optional[str] = None


class AblationResult(BaseModel):
    row: str
    seed: int
    status: str = "ok"
    min_joint_ade: Optional[float] = None
    min_joint_fde: Optional[float] = None
    min_ade: Optional[float] = None
    min_fde: Optional[float] = None
    parameter_count: Optional[int] = None
    error: Optional[str] = None
