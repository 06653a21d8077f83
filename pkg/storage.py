import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from pydantic import ValidationError

from config import RunConfig
from errors import ScenarioParseError, VersionError
from models import (
    MANIFEST_FORMAT_VERSION, EpochRecord, MetricReport, PredictionRecord, Scenario, SplitManifest,
)
from numerics import read_array_blob, write_array_blob
from scene import load_scenario, save_scenario

logger = logging.getLogger(__name__)

SPLITS = ("train", "val")


def _dump(payload: Any) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _read_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ScenarioParseError(str(path), f"line {e.lineno}, column {e.colno}: {e.msg}")


class DatasetStorage:
    """Dataset directory: manifest.json plus train/ and val/ scenario files"""

    def __init__(self, root):
        self.root = Path(root)

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    def scenario_path(self, split: str, scenario_id: str) -> Path:
        return self.root / split / f"{scenario_id}.json"

    def write_dataset(self, manifest: SplitManifest, train: Sequence[Scenario], val: Sequence[Scenario]):
        """Write every scenario, then the manifest that indexes them"""
        try:
            for split, scenarios in (("train", train), ("val", val)):
                (self.root / split).mkdir(parents=True, exist_ok=True)
                for scenario in scenarios:
                    save_scenario(scenario, self.scenario_path(split, scenario.id))
            self.manifest_path.write_text(_dump(manifest.dict()))
            logger.info(f"Wrote dataset to {self.root}: {len(train)} train, {len(val)} val scenarios")
        except OSError as e:
            logger.error(f"Failed to write dataset to {self.root}: {e}")
            raise

    def load_manifest(self) -> SplitManifest:
        if not self.manifest_path.exists():
            raise FileNotFoundError(f"no dataset manifest at {self.manifest_path}")
        payload = _read_json(self.manifest_path)
        version = payload.get("format_version") if isinstance(payload, dict) else None
        if version != MANIFEST_FORMAT_VERSION:
            raise VersionError(f"{self.manifest_path}: manifest format {version}, expected {MANIFEST_FORMAT_VERSION}")
        try:
            return SplitManifest.parse_obj(payload)
        except ValidationError as e:
            raise ScenarioParseError(str(self.manifest_path), str(e))

    def load_split(self, split: str, manifest: Optional[SplitManifest] = None) -> List[Scenario]:
        """Scenarios of one split in manifest order"""
        if split not in SPLITS:
            raise ValueError(f"unknown split '{split}'; expected one of {SPLITS}")
        manifest = manifest or self.load_manifest()
        names = getattr(manifest, split)
        scenarios = [load_scenario(self.root / split / name) for name in names]
        logger.info(f"Loaded {len(scenarios)} {split} scenarios from {self.root}")
        return scenarios


class RunStorage:
    """Run directory: config, loss log, checkpoints, reports and prediction exports"""

    def __init__(self, run_dir):
        self.root = Path(run_dir)

    def ensure(self) -> "RunStorage":
        self.root.mkdir(parents=True, exist_ok=True)
        return self

    @property
    def loss_log_path(self) -> Path:
        return self.root / "loss_log.jsonl"

    def checkpoint_dir(self, tag: str) -> Path:
        return self.root / "checkpoints" / tag

    def has_checkpoint(self, tag: str) -> bool:
        return (self.checkpoint_dir(tag) / "state.json").exists()

    def write_config(self, config: RunConfig):
        self.ensure()
        (self.root / "config.json").write_text(config.to_json())

    def read_config(self) -> RunConfig:
        path = self.root / "config.json"
        if not path.exists():
            raise FileNotFoundError(f"no config.json in run directory {self.root}")
        return RunConfig.from_values(_read_json(path))

    def append_epoch(self, record: EpochRecord):
        with self.loss_log_path.open("a") as handle:
            handle.write(json.dumps(record.dict(), sort_keys=True) + "\n")

    def read_loss_log(self) -> List[EpochRecord]:
        if not self.loss_log_path.exists():
            return []
        lines = self.loss_log_path.read_text().splitlines()
        return [EpochRecord.parse_obj(json.loads(line)) for line in lines if line.strip()]

    def rewrite_loss_log(self, records: Sequence[EpochRecord]):
        """Replace the log, used when resuming so epochs after the checkpoint are dropped"""
        self.loss_log_path.write_text("".join(json.dumps(r.dict(), sort_keys=True) + "\n" for r in records))

    def save_checkpoint(self, tag: str, model, optimizer, state: Dict[str, Any]):
        """Parameters, optimizer moments and a state file with the model signature"""
        directory = self.checkpoint_dir(tag)
        try:
            directory.mkdir(parents=True, exist_ok=True)
            write_array_blob(model.params.arrays(), directory / "params.manifest", directory / "params.bin")
            if optimizer is not None:
                write_array_blob(optimizer.state_arrays(), directory / "optimizer.manifest", directory / "optimizer.bin")
            payload = dict(state, model_signature=model.config.model_signature(),
                           optimizer_steps=optimizer.steps if optimizer is not None else 0)
            (directory / "state.json").write_text(_dump(payload))
            logger.info(f"Saved checkpoint '{tag}' at epoch {state.get('epoch')} to {directory}")
        except OSError as e:
            logger.error(f"Failed to save checkpoint {directory}: {e}")
            raise

    def load_checkpoint(self, tag: str, model, optimizer=None) -> Dict[str, Any]:
        directory = self.checkpoint_dir(tag)
        if not (directory / "state.json").exists():
            raise FileNotFoundError(f"no checkpoint at {directory}")
        state = _read_json(directory / "state.json")
        expected = model.config.model_signature()
        found = state.get("model_signature", {})
        if found != expected:
            changed = sorted(k for k in expected if found.get(k) != expected[k])
            raise VersionError(f"checkpoint {directory} was written for a different model shape (keys {changed})")
        model.params.load_arrays(read_array_blob(directory / "params.manifest", directory / "params.bin"))
        if optimizer is not None:
            optimizer.load_state(read_array_blob(directory / "optimizer.manifest", directory / "optimizer.bin"),
                                 state.get("optimizer_steps", 0))
        logger.info(f"Loaded checkpoint '{tag}' (epoch {state.get('epoch')}) from {directory}")
        return state

    def write_report(self, report: MetricReport, stem: str = "report") -> Path:
        self.ensure()
        (self.root / f"{stem}.txt").write_text(report.to_text())
        path = self.root / f"{stem}.json"
        path.write_text(_dump(report.dict()))
        logger.info(f"Wrote report to {path}")
        return path

    def write_predictions(self, record: PredictionRecord) -> Path:
        directory = self.root / "predictions"
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / f"{record.scenario_id}.json"
        path.write_text(_dump(record.dict()))
        return path

    def write_text(self, name: str, text: str) -> Path:
        self.ensure()
        path = self.root / name
        path.write_text(text)
        return path


def load_prediction(path) -> PredictionRecord:
    path = Path(path)
    try:
        return PredictionRecord.parse_obj(_read_json(path))
    except ValidationError as e:
        raise ScenarioParseError(str(path), str(e))
