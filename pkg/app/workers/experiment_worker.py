# app/workers/experiment_worker.py
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from app.errors import ConfigError, DataError
from app.models import DataSection, RunRecord, TrainConfig
from app.services.config_service import dump_config, with_overrides
from app.services.data_service import (DomainDataset, generate_domains, load_csv, load_multi_domain_csv,
                                       select_sources, split_domains)
from app.services.moda import ModaTrainer
from app.services.nn import save_checkpoint
from app.services.record_service import MetricsWriter, write_summary

Datasets = Tuple[List[DomainDataset], DomainDataset, DomainDataset]


def _load_test(data: DataSection) -> Optional[DomainDataset]:
    if not data.target_test_path:
        return None
    return load_csv(data.target_test_path, has_labels=True, num_classes=data.shift.classes,
                    domain_id="target", as_oracle=True)


def load_datasets(config: TrainConfig) -> Datasets:
    """
    Resolve the configured data into (sources, target train, evaluation set).

    The evaluation set is the held-out target split, or the target training
    set itself in transductive mode or when no split exists.
    """
    data = config.data
    if data.kind == "synthetic":
        seed = config.run.seed if data.seed is None else data.seed
        sources, target, test = split_domains(generate_domains(data.shift, seed))
    elif data.domains_path is not None:
        domains = load_multi_domain_csv(data.domains_path, has_labels=True, num_classes=data.shift.classes)
        if data.target_domain not in domains:
            raise DataError(f"{data.domains_path}: no rows for target domain {data.target_domain!r}")
        target = domains.pop(data.target_domain).sealed()
        if not domains:
            raise DataError(f"{data.domains_path}: no source domains besides {data.target_domain!r}")
        sources = list(domains.values())
        test = _load_test(data)
    else:
        num_classes = data.shift.classes
        sources = [load_csv(path, has_labels=True, num_classes=num_classes, domain_id=f"source_{j}")
                   for j, path in enumerate(data.source_paths)]
        target = load_csv(data.target_path, has_labels=data.target_has_labels, num_classes=num_classes,
                          domain_id="target", as_oracle=True)
        test = _load_test(data)
    sources = select_sources(sources, data.source_subset)
    evaluation = target if data.transductive or test is None else test
    return sources, target, evaluation


def run_name(config: TrainConfig) -> str:
    return f"{config.run.mode}_seed{config.run.seed}"


def seed_jobs(config: TrainConfig, repeat: int) -> List[TrainConfig]:
    """Seeds seed..seed+K-1 on one shared synthetic draw."""
    if repeat < 1:
        raise ConfigError(f"repeat must be at least 1, got {repeat}")
    base = config.run.seed
    data_seed = base if config.data.seed is None else config.data.seed
    return [with_overrides(config, {"run.seed": base + k, "data.seed": data_seed}) for k in range(repeat)]


class ExperimentWorker:
    log_name = "experiment_worker.log"

    def __init__(self, config: TrainConfig):
        self.config = config
        self.out_dir = Path(config.run.out_dir)
        self._setup_logging()
        self.threadpool_size = config.threadpool.size

    def _setup_logging(self):
        """Configure logging for the worker"""
        log_dir = self.out_dir / "logs"
        os.makedirs(log_dir, exist_ok=True)

        # first worker in the process owns the handlers
        if not logging.getLogger().handlers:
            logging.basicConfig(
                level=logging.INFO,
                format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
                handlers=[
                    logging.FileHandler(log_dir / self.log_name),
                    logging.StreamHandler()
                ]
            )
        self.logger = logging.getLogger(__name__)

    def train(self, config: TrainConfig, sources: Sequence[DomainDataset], target: DomainDataset,
              evaluation: DomainDataset, run_dir: Optional[Path] = None) -> RunRecord:
        """Train one model; with ``run_dir`` the config, metrics CSV and checkpoint are written there."""
        trainer = ModaTrainer(config, sources, target, evaluation, run_id=run_name(config))
        if run_dir is None:
            return trainer.train()
        run_dir.mkdir(parents=True, exist_ok=True)
        dump_config(config, run_dir / "config.yaml")
        writer = MetricsWriter(run_dir / "metrics.csv", len(sources))
        record = trainer.train(on_epoch=writer.append)
        record.metrics_path = str(writer.path)
        record.checkpoint_path = str(save_checkpoint(trainer.model.params, run_dir / "model.ckpt"))
        return record

    def process_job(self, job: TrainConfig):
        """Run one configured experiment; returns (success, RunRecord or failure message)"""
        name = run_name(job)
        self.logger.info(f"Processing run {name}")
        try:
            sources, target, evaluation = load_datasets(job)
            record = self.train(job, sources, target, evaluation, Path(job.run.out_dir) / name)
            if record.status == "completed":
                self.logger.info(f"Run {name} completed: target accuracy {record.final_accuracy:.4f}")
                return True, record
            return False, record
        except Exception as e:
            self.logger.error(f"Error processing run {name}: {str(e)}")
            return False, str(e)

    def _failed_record(self, job: TrainConfig, reason: str) -> RunRecord:
        return RunRecord(run_id=run_name(job), seed=job.run.seed, mode=job.run.mode, status="failed",
                         failure_reason=reason)

    def run_experiment(self) -> RunRecord:
        """Single run for the configured seed; writes CSV, checkpoint and summary."""
        success, result = self.process_job(self.config)
        record = result if isinstance(result, RunRecord) else self._failed_record(self.config, result)
        write_summary([record], self.out_dir / run_name(self.config) / "summary.json")
        return record

    def run_jobs(self, jobs: Sequence[TrainConfig], summary_path: Path) -> List[RunRecord]:
        """Run jobs in the thread pool; records come back in job order."""
        self.logger.info(f"Starting {len(jobs)} runs with threadpool size {self.threadpool_size}")
        records = []
        with ThreadPoolExecutor(max_workers=self.threadpool_size) as executor:
            futures = [(executor.submit(self.process_job, job), job) for job in jobs]
            for future, job in futures:
                success, result = future.result()
                records.append(result if isinstance(result, RunRecord) else self._failed_record(job, result))
        write_summary(records, summary_path)
        failed = sum(r.status == "failed" for r in records)
        if failed:
            self.logger.warning(f"{failed} of {len(records)} runs failed")
        return records

    def run_batch(self, repeat: int) -> List[RunRecord]:
        """``repeat`` seeds starting at run.seed; each run writes its own directory."""
        return self.run_jobs(seed_jobs(self.config, repeat), self.out_dir / "summary.json")
