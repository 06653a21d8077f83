import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from config import RunConfig
from errors import DataError, ILNetError
from evalmetrics import evaluate_run
from ilnet import ILNet
from models import (
    AblationResult, AblationRow, AgentPrediction, EpochRecord, MetricReport, PredictionRecord, Scenario,
    ScenarioKind, SplitManifest,
)
from objective import Trainer
from scene import generate_scenario, mask_history, select_challenging
from storage import DatasetStorage, RunStorage

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["min_joint_ade", "min_joint_fde", "min_ade", "min_fde"]


def ablation_grid(config: RunConfig) -> List[AblationRow]:
    """Named deltas on the base configuration; mask rows re-evaluate a trained row"""
    midpoint = {"das_mode": "midpoint"}
    rows = [
        AblationRow(name="ta_only", changes={"disable_fa": True, "disable_ha": True, **midpoint}),
        AblationRow(name="ta_fa", changes={"disable_ha": True, **midpoint}),
        AblationRow(name="ta_ha", changes={"disable_fa": True, **midpoint}),
        AblationRow(name="forward_il", changes={"il_order": "forward", **midpoint}),
        AblationRow(name="inverse_il", changes={"il_order": "inverse", **midpoint}),
        AblationRow(name="ta_das", changes={"disable_fa": True, "disable_ha": True, "das_mode": "dynamic"}),
        AblationRow(name="full", changes={"il_order": "inverse", "das_mode": "dynamic"}),
        AblationRow(name="das_no_conv", changes={"das_mode": "no_conv"}),
    ]
    for scale, label in ((1.5, "1.5x"), (2.0, "2x")):
        radius = scale * config.agent_radius
        rows.append(AblationRow(name=f"radius_{label}", changes={"future_radius": radius, "history_radius": radius}))
    for ratio in config.mask_ratios:
        percent = int(round(100 * ratio))
        rows.append(AblationRow(name=f"mask{percent}_full", mask_ratio=ratio, source="full"))
        rows.append(AblationRow(name=f"mask{percent}_ta_das", mask_ratio=ratio, source="ta_das"))
    return rows


def _kind_schedule(mix: Dict[str, float], count: int, rng: np.random.Generator) -> List[ScenarioKind]:
    """Largest-remainder allocation of ``count`` scenarios to kinds, shuffled"""
    kinds = [kind for kind in ScenarioKind if mix.get(kind.value, 0.0) > 0]
    weights = np.array([mix[kind.value] for kind in kinds], dtype=np.float64)
    exact = count * weights / weights.sum()
    counts = np.floor(exact).astype(int)
    for i in np.argsort(-(exact - counts), kind="stable")[: count - counts.sum()]:
        counts[i] += 1
    schedule = [kind for kind, c in zip(kinds, counts) for _ in range(c)]
    return [schedule[i] for i in rng.permutation(len(schedule))]


def prediction_record(scenario: Scenario, forecast, task: str) -> PredictionRecord:
    agents = []
    for i in np.flatnonzero(forecast.scored):
        anchors = forecast.anchors_global[i].tolist() if forecast.anchors_global is not None else None
        agents.append(AgentPrediction(
            id=forecast.agent_ids[i],
            probs=forecast.probs[i].tolist(),
            finals=forecast.finals_global[i].tolist(),
            proposals=forecast.proposals_global[i].tolist(),
            anchors=anchors,
        ))
    return PredictionRecord(scenario_id=scenario.id, task=task, agents=agents)


class PredictorService:
    """Orchestrates dataset generation, training, evaluation and ablation sweeps"""

    def __init__(self, config: RunConfig):
        self.config = config
        logger.info(f"Predictor service initialized (seed {config.seed}, task {config.task})")

    def _map(self, fn, items: Sequence, workers: Optional[int] = None) -> list:
        workers = workers or self.config.workers
        if workers > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                return list(pool.map(fn, items))
        return [fn(item) for item in items]

    def generate_dataset(self, out_dir) -> SplitManifest:
        """Deterministic train/val scenarios and their manifest"""
        cfg = self.config
        try:
            rng = np.random.default_rng([cfg.seed, 0])
            schedule = _kind_schedule(cfg.kind_mix, cfg.n_train + cfg.n_val, rng)
            jobs = [(kind, cfg.seed * 1_000_000 + i) for i, kind in enumerate(schedule)]
            scenarios = self._map(lambda job: generate_scenario(job[0], job[1], cfg.history_steps,
                                                                cfg.future_steps, cfg.sample_rate_hz), jobs)
            train, val = scenarios[:cfg.n_train], scenarios[cfg.n_train:]
            manifest = SplitManifest(
                seed=cfg.seed, kind_mix=cfg.kind_mix, sample_rate_hz=cfg.sample_rate_hz,
                history_steps=cfg.history_steps, future_steps=cfg.future_steps,
                train=[f"{s.id}.json" for s in train], val=[f"{s.id}.json" for s in val],
            )
            DatasetStorage(out_dir).write_dataset(manifest, train, val)
            (Path(out_dir) / "config.json").write_text(cfg.to_json())
            counts = pd.Series([kind.value for kind in schedule]).value_counts().sort_index()
            logger.info(f"Generated {len(scenarios)} scenarios: {counts.to_dict()}")
            return manifest
        except Exception as e:
            logger.error(f"Error generating dataset in {out_dir}: {e}")
            raise

    def _load(self, data_dir, split: str) -> List[Scenario]:
        storage = DatasetStorage(data_dir)
        manifest = storage.load_manifest()
        if (manifest.history_steps, manifest.future_steps) != (self.config.history_steps, self.config.future_steps):
            raise DataError(f"dataset {data_dir} has H={manifest.history_steps}, F={manifest.future_steps}; "
                            f"the run expects H={self.config.history_steps}, F={self.config.future_steps}")
        return storage.load_split(split, manifest)

    def train(self, run_dir, data_dir=None, resume: bool = False) -> Dict[str, float]:
        """Train with per-epoch validation; keeps the best and the last checkpoint"""
        cfg = self.config
        data_dir = data_dir or cfg.data_dir
        run = RunStorage(run_dir).ensure()
        try:
            train = self._load(data_dir, "train")
            val = self._load(data_dir, "val")
            model = ILNet(cfg)
            trainer = Trainer(model, cfg)
            contexts = self._map(model.prepare, train)

            start_epoch, best = 0, math.inf
            records: List[EpochRecord] = []
            if resume and run.has_checkpoint("last"):
                state = run.load_checkpoint("last", model, trainer.optimizer)
                start_epoch = int(state["epoch"]) + 1
                best = state.get("best_metric")
                best = math.inf if best is None else float(best)
                records = [r for r in run.read_loss_log() if r.epoch < start_epoch]
                logger.info(f"Resuming {run_dir} at epoch {start_epoch}")
            elif resume:
                logger.warning(f"No checkpoint to resume in {run_dir}; starting from scratch")
            run.rewrite_loss_log(records)
            run.write_config(cfg)

            selection = "min_joint_fde" if cfg.task == "joint" else "min_fde"
            for epoch in range(start_epoch, cfg.epochs):
                lr, losses = trainer.train_epoch(contexts, epoch)
                report = evaluate_run(model, val, cfg.task, cfg.mr_threshold, cfg.raster_cell, cfg.raster_margin,
                                      workers=cfg.workers)
                metric = getattr(report, selection)
                improved = metric < best
                if improved:
                    best = metric
                record = EpochRecord(
                    epoch=epoch, lr=lr, **losses.as_dict(),
                    val_min_joint_fde=report.min_joint_fde, val_min_joint_ade=report.min_joint_ade,
                    val_min_fde=report.min_fde, val_min_ade=report.min_ade,
                    selection_metric=metric, best=improved,
                )
                run.append_epoch(record)
                state = {"epoch": epoch, "best_metric": best, "selection": selection}
                if improved:
                    run.save_checkpoint("best", model, trainer.optimizer, state)
                run.save_checkpoint("last", model, trainer.optimizer, state)
                logger.info(f"Epoch {epoch}: lr {lr:.3e}, loss {losses.total:.4f}, val {selection} {metric:.4f}"
                            f"{' (best)' if improved else ''}")
            return {"best_metric": best, "epochs": cfg.epochs}
        except ILNetError as e:
            logger.error(f"Training in {run_dir} failed: {e}")
            raise

    def load_model(self, run_dir, checkpoint: str = "best") -> ILNet:
        run = RunStorage(run_dir)
        model = ILNet(run.read_config())
        run.load_checkpoint(checkpoint, model)
        return model

    def evaluate(self, run_dir, data_dir=None, split: str = "val", checkpoint: str = "best",
                 mask_ratio: Optional[float] = None, challenging: bool = False,
                 dump_predictions: bool = False) -> MetricReport:
        cfg = self.config
        data_dir = data_dir or cfg.data_dir
        mask_ratio = cfg.mask_ratio if mask_ratio is None else mask_ratio
        run = RunStorage(run_dir)
        try:
            model = self.load_model(run_dir, checkpoint)
            scenarios = self._load(data_dir, split)
            if challenging:
                scenarios = select_challenging(scenarios, cfg.challenge_fde, cfg.challenge_interaction_steps,
                                               cfg.challenge_alpha_deg)
                if not scenarios:
                    raise DataError("no scenario passes the challenging-scenario filter")
            report = evaluate_run(model, scenarios, cfg.task, cfg.mr_threshold, cfg.raster_cell, cfg.raster_margin,
                                  mask_ratio=mask_ratio, mask_seed=cfg.seed, workers=cfg.workers, split=split,
                                  challenging=challenging)
            stem = "report"
            if challenging:
                stem += "_challenging"
            if mask_ratio:
                stem += f"_mask{int(round(100 * mask_ratio))}"
            run.write_report(report, stem)
            if dump_predictions:
                for scenario in scenarios:
                    seen = mask_history(scenario, mask_ratio, cfg.seed) if mask_ratio > 0 else scenario
                    run.write_predictions(prediction_record(scenario, model.forecast(seen), cfg.task))
                logger.info(f"Wrote {len(scenarios)} prediction files to {run.root / 'predictions'}")
            return report
        except ILNetError as e:
            logger.error(f"Evaluation of {run_dir} failed: {e}")
            raise

    def ablate(self, out_dir, data_dir=None) -> pd.DataFrame:
        """Train every row for every seed, re-evaluate mask rows, and tabulate mean and spread"""
        base = self.config
        data_dir = data_dir or base.data_dir
        out = RunStorage(out_dir).ensure()
        out.write_config(base)
        rows = ablation_grid(base)
        if base.ablation_rows:
            wanted = set(base.ablation_rows)
            unknown = wanted - {row.name for row in rows}
            if unknown:
                raise DataError(f"unknown ablation rows {sorted(unknown)}")
            rows = [row for row in rows if row.name in wanted]

        results: List[AblationResult] = []
        for row in rows:
            for seed in base.ablation_seeds:
                results.append(self._ablation_cell(row, seed, out.root, data_dir))

        table = pd.DataFrame([r.dict() for r in results])
        summary = summarize_ablation(table, [row.name for row in rows])
        table.to_csv(out.root / "ablation_runs.csv", index=False)
        summary.to_csv(out.root / "ablation.csv", index=False)
        out.write_text("ablation.json", summary.to_json(orient="records", indent=2) + "\n")
        out.write_text("ablation.txt", summary.to_string(index=False) + "\n")
        failed = table[table["status"] != "ok"]
        logger.info(f"Ablation finished: {len(table) - len(failed)} ok, {len(failed)} failed")
        return summary

    def _ablation_cell(self, row: AblationRow, seed: int, root: Path, data_dir) -> AblationResult:
        try:
            if row.source is not None:
                run_dir = root / row.source / f"seed_{seed}"
                service = PredictorService(RunStorage(run_dir).read_config())
                report = service.evaluate(run_dir, data_dir, mask_ratio=row.mask_ratio)
            else:
                config = self.config.updated(seed=seed, **row.changes)
                run_dir = root / row.name / f"seed_{seed}"
                service = PredictorService(config)
                service.train(run_dir, data_dir)
                report = service.evaluate(run_dir, data_dir, mask_ratio=0.0)
            return AblationResult(row=row.name, seed=seed, parameter_count=report.parameter_count,
                                  **{key: getattr(report, key) for key in METRIC_COLUMNS})
        except Exception as e:
            logger.warning(f"Ablation row {row.name} seed {seed} failed: {e}")
            return AblationResult(row=row.name, seed=seed, status="failed", error=str(e))


def summarize_ablation(table: pd.DataFrame, order: Sequence[str]) -> pd.DataFrame:
    """Mean and standard deviation per row over successful seeds; mask rows add relative minFDE degradation"""
    table = table.astype({column: float for column in METRIC_COLUMNS})
    ok = table[table["status"] == "ok"]
    stats = ok.groupby("row")[METRIC_COLUMNS].agg(["mean", "std"])
    stats.columns = [f"{metric}_{stat}" for metric, stat in stats.columns]
    stats["seeds_ok"] = ok.groupby("row").size()
    failed = table[table["status"] != "ok"]
    stats["seeds_failed"] = failed.groupby("row").size()
    summary = stats.reindex(order)
    summary["seeds_ok"] = summary["seeds_ok"].fillna(0).astype(int)
    summary["seeds_failed"] = summary["seeds_failed"].fillna(0).astype(int)
    summary["status"] = np.where(summary["seeds_ok"] > 0, "ok", "failed")
    messages = "seed " + failed["seed"].astype(str) + ": " + failed["error"].fillna("unknown error").astype(str)
    summary["errors"] = messages.groupby(failed["row"]).agg("; ".join)
    summary["errors"] = summary["errors"].fillna("")

    by_seed = ok.set_index(["row", "seed"])["min_fde"]
    degradation = {}
    for name in order:
        if not name.startswith("mask"):
            continue
        source = name.split("_", 1)[1]
        ratios = []
        for (row, seed), value in by_seed.items():
            if row == name and (source, seed) in by_seed.index:
                unmasked = by_seed[(source, seed)]
                ratios.append((value - unmasked) / unmasked)
        degradation[name] = float(np.mean(ratios)) if ratios else np.nan
    summary["min_fde_degradation"] = pd.Series(degradation)
    return summary.reset_index().rename(columns={"index": "row"})
