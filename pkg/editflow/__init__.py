import asyncio
import logging
import os
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence as Seq, Tuple

import numpy as np
from diskcache import Cache

from editflow.oracle import coupling_atoms, edit_distance
from editflow.rate_model import ModelParams, init_params, reversed_spec
from editflow.sampler import guided_rate_fn, simulate, simulate_population
from editflow.schemas.config_schemas import RunConfig, SamplerConfig
from editflow.schemas.record_schemas import CheckResult, SuiteReport, VerifyReport
from editflow.structures import ConfigError, ModelError, SamplerError
from editflow.training import make_pair_sampler, split_conditioning, train, train_reverse
from editflow.utils.config_ops import cache_dir_for, config_hash, output_dir_default
from editflow.utils.datasets import build_datasets, vocab_from_config
from editflow.utils.heatmap_ops import HeatmapSummary, reference_rows, tabulate
from editflow.utils.io_ops import VERSION, RecordWriter, load_checkpoint, make_header, save_checkpoint, write_heatmap_csv
from editflow.utils.report_ops import write_verify_report
from editflow.variables import DEFAULT_SUITES, suite_mapping

logger = logging.getLogger(__name__)


@dataclass
class TrainArtifacts:
    checkpoint_path: str
    metrics_path: str
    reverse_checkpoint_path: Optional[str] = None
    final_loss: Optional[float] = None


class EditFlowPipeline:
    """
        Args:
            config: fully resolved run configuration
            output_dir: folder for checkpoints, traces, tables and reports
                (defaults to run.output_dir, then $EDITFLOW_OUTPUT_DIR, then ./output)
            log_callback: receives every progress message
            max_concurrent_checks: verifier suites running at once

        """
    def __init__(
        self,
        config: RunConfig,
        output_dir: Optional[str] = None,
        log_callback: Optional[Callable[[str], None]] = None,
        max_concurrent_checks: Optional[int] = None,
    ):
        self.config = config
        self.output_dir = output_dir or config.run.output_dir or output_dir_default()
        self.log_callback = log_callback
        self.max_concurrent_checks = max_concurrent_checks or config.run.max_concurrent_checks
        self.config_hash = config_hash(config)
        self.vocab = vocab_from_config(config.data)

        # make the output_dir
        os.makedirs(self.output_dir, exist_ok=True)
        self.cache = Cache(cache_dir_for(self.output_dir))

        self._log(f"⚙️ Resolved config: {config.model_dump_json()}")
        self._log(f"🔑 Config hash: {self.config_hash}")

    def _log(self, message: str):
        """Internal logging method that uses callback if available"""
        logger.info(message)
        if self.log_callback:
            self.log_callback(message)

    def _path(self, out: Optional[str], default_name: str) -> str:
        return out or os.path.join(self.output_dir, default_name)

    # --- train ---

    def train(self, out: Optional[str] = None) -> TrainArtifacts:
        """Train the forward rate model (and the reverse one when run.train_reverse)."""
        cfg = self.config
        self._log("=" * 50)
        self._log(f"🚀 Training {cfg.model.kind} model: {cfg.train.steps} steps, coupling={cfg.train.coupling}")
        self._log("=" * 50)
        try:
            source, target = build_datasets(cfg.data)
            pair_sampler = make_pair_sampler(source, target, cfg.train, conditioning=cfg.data.conditioning)
            params = init_params(cfg.model, np.random.default_rng(cfg.train.seed))

            checkpoint_path = self._path(out, "checkpoint.ckpt")
            metrics_path = os.path.splitext(checkpoint_path)[0] + ".metrics.ndjson"

            self._log("\n📌 Forward rate")
            result = train(params, pair_sampler, cfg.train, log_callback=self._log)
            save_checkpoint(result.params, checkpoint_path)
            with RecordWriter(metrics_path, make_header("metrics", self.config_hash, cfg.train.seed)) as writer:
                writer.write_all(result.history)
            if result.clamp_warnings:
                self._log(f"⚠️ {result.clamp_warnings} target rates were clamped before the log")
            self._log(f"✅ Checkpoint written to {checkpoint_path}")

            artifacts = TrainArtifacts(
                checkpoint_path, metrics_path,
                final_loss=result.history[-1].loss if result.history else None,
            )

            if cfg.run.train_reverse:
                self._log("\n📌 Reverse rate")
                rev_params = init_params(reversed_spec(cfg.model), np.random.default_rng(cfg.train.seed + 1))
                rev = train_reverse(rev_params, pair_sampler, cfg.train, log_callback=self._log)
                artifacts.reverse_checkpoint_path = save_checkpoint(
                    rev.params, os.path.splitext(checkpoint_path)[0] + ".reverse.ckpt"
                )
                self._log(f"✅ Reverse checkpoint written to {artifacts.reverse_checkpoint_path}")

            self._log("🎉 Training complete")
            return artifacts
        except Exception as e:
            self._log(f"\n❌ Error during training: {str(e)}")
            raise

    # --- sample ---

    def _load_params(self, checkpoint: Optional[str]) -> ModelParams:
        path = checkpoint or self.config.run.checkpoint or os.path.join(self.output_dir, "checkpoint.ckpt")
        self._log(f"📂 Loading checkpoint {path}")
        params = load_checkpoint(path)
        if params.spec.vocab_size != self.config.data.vocab_size:
            raise ModelError(
                f"Checkpoint vocabulary has {params.spec.vocab_size} tokens, the config has {self.config.data.vocab_size}"
            )
        return params

    def _sampler_config(self, params: ModelParams) -> SamplerConfig:
        cfg = self.config.sampler
        if params.spec.kind == "tabular" and cfg.max_length > params.spec.max_length:
            # the tabular model has no rates beyond its enumerated states
            cfg = cfg.model_copy(update={"max_length": params.spec.max_length})
        return cfg

    def _reverse_params(self, reverse_checkpoint: Optional[str]) -> Optional[ModelParams]:
        if self.config.sampler.alpha.scale == 0.0:
            return None
        path = reverse_checkpoint or self.config.run.reverse_checkpoint
        if path is None:
            raise SamplerError("sampler.alpha > 0 needs run.reverse_checkpoint")
        return self._load_params(path)

    def sample(
        self,
        checkpoint: Optional[str] = None,
        count: Optional[int] = None,
        out: Optional[str] = None,
        reverse_checkpoint: Optional[str] = None,
    ) -> str:
        """Write `count` generation traces, one record per line after the header."""
        count = self.config.run.count if count is None else count
        self._log(f"🎲 Sampling {count} traces")
        try:
            params = self._load_params(checkpoint)
            cfg = self._sampler_config(params)
            rev = self._reverse_params(reverse_checkpoint)
            source, target = build_datasets(self.config.data)
            path = self._path(out, "traces.ndjson")
            rng = np.random.default_rng(cfg.seed)
            streams = np.random.SeedSequence(cfg.seed).spawn(count) if count else []
            drops = 0
            with RecordWriter(path, make_header("traces", self.config_hash, cfg.seed)) as writer:
                for i, stream in enumerate(streams):
                    x0 = source.sample(rng)
                    cond = None
                    if self.config.data.conditioning:
                        _, cond = split_conditioning(target.sample(rng), 0.0, rng)
                    trace = simulate(
                        guided_rate_fn(params, cond, cfg), x0, cfg, np.random.default_rng(stream),
                        reverse_rates=guided_rate_fn(rev, cond, cfg, reverse=True) if rev is not None else None,
                    )
                    drops += trace.overflow_drops
                    writer.write(trace.to_record(i, self.vocab if self.config.run.decode else None))
            if drops:
                self._log(f"⚠️ {drops} insertions dropped at the length cap")
            self._log(f"✅ Traces written to {path}")
            return path
        except Exception as e:
            self._log(f"\n❌ Error during sampling: {str(e)}")
            raise

    # --- coupling heatmap ---

    def coupling_heatmap(
        self,
        checkpoint: Optional[str] = None,
        count: Optional[int] = None,
        out: Optional[str] = None,
    ) -> Tuple[str, str, HeatmapSummary]:
        """Estimate p̂1(x1 | x0) for every source string; also write the training coupling."""
        count = self.config.run.count if count is None else count
        if count < 1:
            raise ConfigError("coupling-heatmap needs run.count >= 1")
        try:
            params = self._load_params(checkpoint)
            cfg = self._sampler_config(params)
            source, target = build_datasets(self.config.data)
            source_atoms, target_atoms = source.atoms(), target.atoms()
            sources = [x for x, _ in source_atoms]
            targets = [x for x, _ in target_atoms]
            self._log(f"🗺️ Simulating {count} samples for each of {len(sources)} sources")

            finals: Dict = {}
            edits: List[float] = []
            distances: List[float] = []
            streams = np.random.SeedSequence(cfg.seed).spawn(len(sources))
            for x0, stream in zip(sources, streams):
                result = simulate_population(guided_rate_fn(params, None, cfg), [x0] * count, cfg, np.random.default_rng(stream))
                finals[x0] = Counter(result.final)
                edits.append(float(result.edit_counts.mean()))
                distances.append(sum(c * edit_distance(x0, x1) for x1, c in finals[x0].items()) / count)

            train_cfg = self.config.train
            atoms = coupling_atoms(train_cfg.coupling, source_atoms, target_atoms, self.vocab,
                                   train_cfg.num_delete, train_cfg.num_substitute)
            coupling_mean = sum(p * pair.num_disagreements() for pair, p in atoms)
            coupling_distance = sum(p * edit_distance(pair.x0, pair.x1) for pair, p in atoms)
            source_probs = [p for _, p in source_atoms]

            summary = HeatmapSummary(
                finals=finals,
                targets=targets,
                target_probs=[p for _, p in target_atoms],
                mean_edits=float(np.average(edits, weights=source_probs)),
                coupling_mean_edits=float(coupling_mean),
                mean_distance=float(np.average(distances, weights=source_probs)),
                coupling_mean_distance=float(coupling_distance),
                rows=tabulate(finals, targets, self.vocab),
            )
            header = make_header("heatmap", self.config_hash, cfg.seed)
            path = write_heatmap_csv(self._path(out, "heatmap.csv"), summary.rows, header)
            reference = write_heatmap_csv(
                os.path.splitext(path)[0] + ".reference.csv", reference_rows(sources, target_atoms, self.vocab), header
            )
            self._log(
                f"📊 marginal TV to q = {summary.marginal_tv():.4f}, "
                f"edits per generation = {summary.mean_edits:.3f} (training coupling {summary.coupling_mean_edits:.3f}), "
                f"edit distance x0 -> x1 = {summary.mean_distance:.3f} (training coupling {summary.coupling_mean_distance:.3f})"
            )
            self._log(f"✅ Heatmap written to {path}")
            return path, reference, summary
        except Exception as e:
            self._log(f"\n❌ Error during heatmap estimation: {str(e)}")
            raise

    # --- verify ---

    def _run_suite(self, name: str, seed: int, samples: Optional[int]) -> SuiteReport:
        self._log(f"🔬 Running suite: {name}")
        report = suite_mapping[name](seed=seed, samples=samples, cache=self.cache)
        mark = "✅" if report.passed else "❌"
        self._log(f"{mark} {name}: {sum(c.passed for c in report.checks)}/{len(report.checks)} checks passed")
        return report

    async def run_suites(self, names: Seq[str], seed: int = 0, samples: Optional[int] = None) -> List[SuiteReport]:
        """Run suites in worker threads, at most max_concurrent_checks at a time."""
        unknown = [n for n in names if n not in suite_mapping]
        if unknown:
            raise ConfigError(f"Unknown suite(s) {unknown}; choose from {sorted(suite_mapping)}")

        # Create a semaphore to limit concurrent suites
        semaphore = asyncio.Semaphore(self.max_concurrent_checks)

        async def run_with_semaphore(name):
            async with semaphore:
                return await asyncio.to_thread(self._run_suite, name, seed, samples)

        self._log(f"📋 Running {len(names)} suites (max {self.max_concurrent_checks} concurrent)...")
        results = await asyncio.gather(*[run_with_semaphore(n) for n in names], return_exceptions=True)
        reports = []
        for name, result in zip(names, results):
            if isinstance(result, Exception):
                self._log(f"❌ Error in suite {name}: {str(result)}")
                result = SuiteReport(suite=name, checks=[
                    CheckResult(name=f"{name}: completed", passed=False, detail=f"{type(result).__name__}: {result}")
                ])
            reports.append(result)
        return reports

    def verify(
        self,
        suites: Optional[Seq[str]] = None,
        seed: int = 0,
        samples: Optional[int] = None,
        out: Optional[str] = None,
    ) -> Tuple[VerifyReport, str]:
        names = list(suites or self.config.run.suites or DEFAULT_SUITES)
        reports = asyncio.run(self.run_suites(names, seed, samples))
        report = VerifyReport(version=VERSION, config_hash=self.config_hash, seed=seed, suites=reports)
        path = write_verify_report(report, self._path(out, "verify_report.txt"))
        self._log(("🎉 All suites passed" if report.passed else "❌ Some checks failed") + f"; report at {path}")
        return report, path

    def close_cache(self):
        """Cleanly close the cache connection."""
        self.cache.close()
