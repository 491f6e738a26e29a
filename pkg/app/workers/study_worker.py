# app/workers/study_worker.py
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from app.errors import ConfigError, DataError
from app.models import SWEEPABLE, BoundReport, OvertrainEntry, RunRecord, SweepRow, TrainConfig
from app.services.config_service import resolve_key, with_overrides
from app.services.data_service import generate_domains, leave_one_out, write_csv
from app.services.divergence import (build_bound_report, estimate_h_divergence, estimate_lambda, js_matrix,
                                     weighted_source_risk)
from app.services.moda import MODEL_STREAM, ModaModel
from app.services.nn import load_into
from app.services.record_service import (format_float, write_bound_report, write_json, write_overtrain,
                                         write_sweep, write_table)
from app.workers.experiment_worker import ExperimentWorker, load_datasets, run_name, seed_jobs

# stream tags continuing the model / step streams of the trainer
SEARCH_STREAM = 2
BOUND_STREAM = 3

OVERTRAIN_MODES = ("moda_fm", "moda")
MIN_OVERTRAIN_EPOCHS = 30
CV_COLUMNS = ["iteration", "mu_d", "mu_s", "mu_c", "mean_acc"]


def tendency_slope(accuracies: Sequence[float]) -> float:
    """Least-squares slope of accuracy per epoch over the last two-thirds of the epochs."""
    y = np.asarray(accuracies, dtype=np.float64)
    if y.size < 2:
        raise ValueError("slope needs at least two epochs")
    start = y.size // 3
    if y.size - start < 2:
        start = 0
    tail = y[start:]
    x = np.arange(start + 1, y.size + 1, dtype=np.float64)
    dx = x - x.mean()
    return float(np.sum(dx * (tail - tail.mean())) / np.sum(dx * dx))


def drop_from_peak(accuracies: Sequence[float]) -> float:
    y = np.asarray(accuracies, dtype=np.float64)
    if y.size == 0:
        raise ValueError("drop from peak needs at least one epoch")
    return float(y.max() - y[-1])


def overtrain_entry(record: RunRecord) -> OvertrainEntry:
    accuracies = [row.acc_target for row in record.rows]
    return OvertrainEntry(
        mode=record.mode,
        seed=record.seed,
        max_accuracy=float(np.max(accuracies)),
        final_accuracy=float(accuracies[-1]),
        drop_from_peak=drop_from_peak(accuracies),
        tail_slope=tendency_slope(accuracies),
    )


def median_entry(mode: str, entries: Sequence[OvertrainEntry]) -> OvertrainEntry:
    def median(field: str) -> float:
        return float(np.median([getattr(e, field) for e in entries])) if entries else float("nan")

    return OvertrainEntry(mode=mode, max_accuracy=median("max_accuracy"), final_accuracy=median("final_accuracy"),
                          drop_from_peak=median("drop_from_peak"), tail_slope=median("tail_slope"))


def log_uniform(rng: np.random.Generator, bounds: Sequence[float]) -> float:
    low, high = bounds
    return float(math.exp(rng.uniform(math.log(low), math.log(high))))


def mixture_sample(sources, alpha: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` source rows split across sources in proportion to alpha (largest remainders)."""
    exact = alpha * count
    counts = np.floor(exact).astype(np.int64)
    remainder = count - int(counts.sum())
    counts[np.argsort(-(exact - counts), kind="stable")[:remainder]] += 1
    blocks = []
    for source, k in zip(sources, counts):
        if k > 0:
            blocks.append(source.features[rng.choice(source.n, size=k, replace=k > source.n)])
    return np.concatenate(blocks)


class StudyWorker(ExperimentWorker):
    """Multi-run studies on top of the experiment worker: sweeps, cross-validation, over-training, bounds."""

    log_name = "study_worker.log"

    # --- sweeps -------------------------------------------------------------------

    def sweep(self, param: str, values: Sequence[float], repeat: int = 1) -> List[SweepRow]:
        if not values:
            raise ConfigError("sweep needs at least one value")
        dotted = resolve_key(param)
        name = dotted.split(".")[-1]
        if name not in SWEEPABLE or not dotted.startswith("loss."):
            raise ConfigError(f"{param!r} is not sweepable; choose one of {list(SWEEPABLE)}")

        sweep_dir = self.out_dir / f"sweep_{name}"
        # every value is validated before the first run starts
        batches = []
        for value in values:
            value_dir = sweep_dir / f"{name}={format_float(value)}"
            config = with_overrides(self.config, {dotted: value, "run.out_dir": str(value_dir)})
            batches.append((float(value), value_dir, seed_jobs(config, repeat)))

        rows = []
        for value, value_dir, jobs in batches:
            self.logger.info(f"Sweep {name}={value}: {len(jobs)} seeds")
            records = self.run_jobs(jobs, value_dir / "summary.json")
            accuracies = [r.final_accuracy for r in records if r.status == "completed" and r.rows]
            rows.append(SweepRow(
                param=name,
                value=value,
                mean_accuracy=float(np.mean(accuracies)) if accuracies else float("nan"),
                std_accuracy=float(np.std(accuracies, ddof=1)) if len(accuracies) > 1 else 0.0,
                n_seeds=len(accuracies),
            ))
        write_sweep(rows, self.out_dir / f"sweep_{name}.csv")
        return rows

    def cross_validate(self) -> Dict[str, object]:
        """
        Random search over mu_d, mu_s and mu_c scored by leave-one-source-out
        accuracy. Each source in turn plays the unlabeled target; the real
        target is never touched.
        """
        sources, _, _ = load_datasets(self.config)
        if len(sources) < 2:
            raise DataError("cross-validation over sources needs at least two sources")
        search = self.config.search
        rng = np.random.default_rng([self.config.run.seed, SEARCH_STREAM])
        trials = []
        for i in range(search.iterations):
            trials.append({
                "iteration": i,
                "mu_d": log_uniform(rng, search.mu_d_range),
                "mu_s": log_uniform(rng, search.mu_s_range),
                "mu_c": log_uniform(rng, search.mu_c_range),
            })

        def score(trial, held_out):
            config = with_overrides(self.config, {f"loss.{k}": trial[k] for k in ("mu_d", "mu_s", "mu_c")})
            remaining, pseudo_target = leave_one_out(sources, held_out)
            record = self.train(config, remaining, pseudo_target, pseudo_target)
            return record.final_accuracy if record.status == "completed" else float("nan")

        with ThreadPoolExecutor(max_workers=self.threadpool_size) as executor:
            futures = [[executor.submit(score, trial, k) for k in range(len(sources))] for trial in trials]
            for trial, folds in zip(trials, futures):
                accuracies = [f.result() for f in folds]
                trial["mean_acc"] = float(np.mean(accuracies))
                self.logger.info(f"Search iteration {trial['iteration']}: mu_d={trial['mu_d']:.3g} "
                                 f"mu_s={trial['mu_s']:.3g} mu_c={trial['mu_c']:.3g} "
                                 f"held-out accuracy {trial['mean_acc']:.4f}")

        scored = [t for t in trials if math.isfinite(t["mean_acc"])]
        if not scored:
            raise DataError("every cross-validation trial failed")
        best = max(scored, key=lambda t: t["mean_acc"])
        write_table(trials, CV_COLUMNS, self.out_dir / "cv_search.csv")
        result = {"best": best, "held_out_sources": len(sources), "iterations": search.iterations}
        write_json(result, self.out_dir / "cv_best.json")
        self.logger.info(f"Best combination: {best}")
        return result

    # --- over-training ------------------------------------------------------------

    def overtrain_study(self, epochs: int = 60, repeat: int = 1) -> List[OvertrainEntry]:
        """Per-seed and median stability figures of moda_fm and moda over a long budget."""
        if epochs < MIN_OVERTRAIN_EPOCHS:
            raise ConfigError(f"over-training study needs at least {MIN_OVERTRAIN_EPOCHS} epochs, got {epochs}")
        study_dir = self.out_dir / "overtrain"
        entries = []
        for mode in OVERTRAIN_MODES:
            config = with_overrides(self.config, {"run.mode": mode, "run.epochs": epochs,
                                                  "run.out_dir": str(study_dir)})
            records = self.run_jobs(seed_jobs(config, repeat), study_dir / f"summary_{mode}.json")
            per_seed = [overtrain_entry(r) for r in records if r.status == "completed" and r.rows]
            entries.extend(per_seed)
            entries.append(median_entry(mode, per_seed))
        write_overtrain(entries, self.out_dir / "overtrain.json")
        return entries

    # --- bound report -------------------------------------------------------------

    def _resolve_alpha(self, alpha_source: str, alpha_values: Optional[Sequence[float]], model: ModaModel,
                       num_sources: int) -> np.ndarray:
        if alpha_source == "uniform":
            return np.full(num_sources, 1.0 / num_sources)
        if alpha_source == "from_checkpoint":
            return model.mixture.alpha
        if alpha_source != "explicit":
            raise ConfigError(f"unknown alpha source {alpha_source!r}")
        if not alpha_values or len(alpha_values) != num_sources:
            raise ConfigError(f"explicit alpha needs {num_sources} values")
        alpha = np.asarray(alpha_values, dtype=np.float64)
        if np.any(alpha < 0) or abs(alpha.sum() - 1.0) > 1e-9:
            raise ConfigError(f"explicit alpha {list(alpha_values)} is not on the simplex")
        return alpha

    def bound_report(self, alpha_source: str = "from_checkpoint", alpha_values: Optional[Sequence[float]] = None,
                     checkpoint: Optional[str] = None, with_lambda: bool = False) -> BoundReport:
        """
        Evaluate every term of the target-risk bound for a trained model.

        Without an explicit checkpoint the configured run's checkpoint is used,
        training it first when it does not exist yet.
        """
        config = self.config
        if alpha_source not in ("from_checkpoint", "uniform", "explicit"):
            raise ConfigError(f"unknown alpha source {alpha_source!r}")
        sources, target, evaluation = load_datasets(config)
        if with_lambda and not target.has_oracle:
            raise ConfigError("lambda estimation is oracle-only and the target has no labels")

        path = Path(checkpoint) if checkpoint else self.out_dir / run_name(config) / "model.ckpt"
        if not path.exists():
            if checkpoint:
                raise ConfigError(f"checkpoint not found at {path}")
            self.logger.info(f"No checkpoint at {path}; training run {run_name(config)} first")
            self.run_experiment()
        num_classes = max(s.num_classes or 0 for s in sources + [target])
        model = ModaModel(target.dim, num_classes, len(sources), config.model,
                          np.random.default_rng([config.run.seed, MODEL_STREAM]))
        load_into(model.params, path)

        alpha = self._resolve_alpha(alpha_source, alpha_values, model, len(sources))
        seed = config.run.seed
        rng = np.random.default_rng([seed, BOUND_STREAM])
        mixture = mixture_sample(sources, alpha, target.n, rng)
        h_divergence = estimate_h_divergence(mixture, target.features, config.probe, seed)
        source_risk = weighted_source_risk(model.predict, sources, alpha)
        can_evaluate = evaluation.has_oracle or evaluation.labels is not None
        target_error = 1.0 - model.accuracy(evaluation) if can_evaluate else None
        lambda_hat = estimate_lambda(sources, target, alpha, config.probe, seed) if with_lambda else None
        labeled = sources + ([target] if target.has_oracle else [])

        report = build_bound_report(
            alpha, config.bound.vc_dimension, config.bound.n or target.n, config.bound.delta,
            h_divergence, source_risk, lambda_hat=lambda_hat, target_error=target_error,
            label_js=js_matrix(labeled, use_oracle=True),
            provenance={
                "seed": seed,
                "data_seed": seed if config.data.seed is None else config.data.seed,
                "mode": config.run.mode,
                "alpha_source": alpha_source,
                "checkpoint": str(path),
                "probe": config.probe.model_dump(mode="json"),
            },
        )
        write_bound_report(report, self.out_dir / "bound_report.json")
        return report

    # --- dataset export -------------------------------------------------------------

    def generate(self) -> List[Path]:
        """Write the configured synthetic domains in the CSV ingestion format."""
        if self.config.data.kind != "synthetic":
            raise ConfigError("generate needs data.kind: synthetic")
        seed = self.config.run.seed if self.config.data.seed is None else self.config.data.seed
        data_dir = self.out_dir / "data"
        paths = []
        for dataset in generate_domains(self.config.data.shift, seed):
            name = dataset.domain_id if dataset.domain_id != "target" else f"target_{dataset.split}"
            paths.append(write_csv(dataset, data_dir / f"{name}.csv", include_labels=True))
        return paths
