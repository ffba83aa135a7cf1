import json
import os
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

from pydantic import ValidationError

from adapt import NRCConfig, build_classifier
from inversion import InversionConfig
from finetune import FinetuneConfig
from pipeline import (
    FULL_TARGET,
    RESULTS_FILE,
    SOURCE_ONLY,
    SUMMARY_FILE,
    TRIAL_RESULT_FILE,
    BenchConfig,
    ExperimentConfig,
    ResultTable,
    SourceTrainConfig,
    TaskConfig,
    TrialResult,
    collect_results,
    emit_report,
    export_client_bundle,
    load_experiment_config,
    load_table,
    open_context,
    run_experiment,
    run_sweep,
    run_trial,
    train_source_classifier,
)
from run_ledger import stage_history
from sampler import SyntheticManifest
from shiftlab import ShiftConfig
from sista_common import ConfigurationError, ContractViolation, StageError
from toybench import PretrainConfig, make_shapes


def trial(seed, accuracies, task="shape", domain="C"):
    return TrialResult(task=task, domain=domain, seed=seed, accuracies=accuracies)


class ResultTableTests(unittest.TestCase):
    def setUp(self):
        self.trials = [
            trial(0, {SOURCE_ONLY: 40.0, "sista-prune-zero": 60.0, FULL_TARGET: 80.0, "sista-base": 50.0}),
            trial(1, {SOURCE_ONLY: 50.0, "sista-prune-zero": 70.0, FULL_TARGET: 90.0, "sista-base": 54.0}),
            trial(0, {SOURCE_ONLY: 30.0, "sista-prune-zero": 50.0}, task="round"),
        ]
        self.table = ResultTable.from_trials(self.trials)

    def test_mean_and_population_std(self):
        row = self.table.cell(SOURCE_ONLY, "C", "shape")
        self.assertAlmostEqual(row.mean, 45.0)
        self.assertAlmostEqual(row.std, 5.0)
        self.assertEqual(row.trials, [40.0, 50.0])
        self.assertEqual(self.table.cell(SOURCE_ONLY, "C", "round").std, 0.0)

    def test_method_order(self):
        self.assertEqual(self.table.methods(), [SOURCE_ONLY, "sista-base", "sista-prune-zero", FULL_TARGET])
        shape_rows = [r.method for r in self.table.rows if r.task == "shape"]
        self.assertEqual(shape_rows, [SOURCE_ONLY, "sista-base", "sista-prune-zero", FULL_TARGET])

    def test_missing_cell(self):
        with self.assertRaises(KeyError):
            self.table.cell(FULL_TARGET, "C", "round")

    def test_task_averages(self):
        averages = self.table.task_averages()
        self.assertAlmostEqual(averages[(SOURCE_ONLY, "C")], (45.0 + 30.0) / 2)
        self.assertAlmostEqual(averages[(FULL_TARGET, "C")], 85.0)

    def test_seed_order_does_not_matter(self):
        flipped = ResultTable.from_trials(list(reversed(self.trials)))
        self.assertEqual(flipped.model_dump(), self.table.model_dump())


class ReportTests(unittest.TestCase):
    def setUp(self):
        self.table = ResultTable.from_trials([
            trial(0, {SOURCE_ONLY: 40.0, "sista-prune-zero": 60.0}),
            trial(1, {SOURCE_ONLY: 44.0, "sista-prune-zero": 62.0}),
            trial(0, {SOURCE_ONLY: 20.0, "sista-prune-zero": 25.0}, domain="A"),
        ])

    def test_single_table_files(self):
        with tempfile.TemporaryDirectory() as tmp:
            paths = emit_report(self.table, tmp)
            names = [p.name for p in paths]
            self.assertEqual(names[:2], [RESULTS_FILE, SUMMARY_FILE])
            self.assertEqual(sorted(names[2:]), ["results_A.png", "results_C.png"])
            self.assertTrue(all(p.exists() for p in paths))
            back = load_table(Path(tmp) / RESULTS_FILE)
            summary = (Path(tmp) / SUMMARY_FILE).read_text(encoding="utf-8")
        self.assertEqual(back.model_dump(), self.table.model_dump())
        self.assertEqual(summary.count("| shape | C | sista-prune-zero |"), 1)
        self.assertEqual(summary.count("| shape | A | source-only |"), 1)

    def test_named_tables(self):
        with tempfile.TemporaryDirectory() as tmp:
            paths = emit_report({"p=10": self.table, "p=50": self.table}, tmp)
            back = load_table(Path(tmp) / RESULTS_FILE)
            self.assertIn("p=10_C.png", [p.name for p in paths])
        self.assertEqual(sorted(back), ["p=10", "p=50"])
        self.assertEqual(back["p=50"].model_dump(), self.table.model_dump())

    def test_empty_report(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ContractViolation):
                emit_report(ResultTable(), tmp)
            with self.assertRaises(ContractViolation):
                emit_report({}, tmp)

    def test_collect_results(self):
        with tempfile.TemporaryDirectory() as tmp:
            for t in (trial(0, {SOURCE_ONLY: 10.0}), trial(1, {SOURCE_ONLY: 30.0})):
                d = Path(tmp) / "trials" / t.task / t.domain / f"seed-{t.seed}"
                d.mkdir(parents=True)
                (d / TRIAL_RESULT_FILE).write_text(t.model_dump_json(), encoding="utf-8")
            table = collect_results(tmp)
            with self.assertRaises(FileNotFoundError):
                collect_results(Path(tmp) / "nothing")
        self.assertAlmostEqual(table.cell(SOURCE_ONLY, "C", "shape").mean, 20.0)


class ExperimentConfigTests(unittest.TestCase):
    def test_defaults(self):
        cfg = ExperimentConfig()
        self.assertEqual(cfg.seeds, [0, 1, 2])
        self.assertEqual(cfg.tasks[0].name, "shape")
        self.assertEqual(cfg.strategy_list(), ["prune-zero"])

    def test_validation(self):
        with self.assertRaises(ValidationError):
            ExperimentConfig(seeds=[1, 1])
        with self.assertRaises(ValidationError):
            ExperimentConfig(example_classes=[0])
        with self.assertRaises(ValidationError):
            ExperimentConfig(shifts=[])
        with self.assertRaises(ValidationError):
            TaskConfig(kind="binary-attribute", attribute="striped")
        self.assertEqual(TaskConfig(kind="binary-attribute", attribute="warm").name, "warm")

    def test_strategy_list_drops_base_and_duplicates(self):
        cfg = ExperimentConfig(strategies=["base", "prune-rewind", "prune-zero", "prune-rewind"])
        self.assertEqual(cfg.strategy_list(), ["prune-rewind", "prune-zero"])
        self.assertEqual(cfg.prune_config("base", 0).ratio, 0.0)
        self.assertEqual(cfg.prune_config("prune-rewind", 0).ratio, 20.0)

    def test_style_layers_override(self):
        cfg = ExperimentConfig(style_layers="1,2")
        self.assertEqual(tuple(cfg.finetune.style_layers.layer_indices), (1, 2))
        self.assertEqual(tuple(cfg.prune_config("prune-zero", 3).style_layers.layer_indices), (1, 2))

    def test_load(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ConfigurationError):
                load_experiment_config(Path(tmp) / "missing.json")
            bad = Path(tmp) / "bad.json"
            bad.write_text(json.dumps({"seeds": [2, 2]}), encoding="utf-8")
            with self.assertRaises(ConfigurationError):
                load_experiment_config(bad)
            good = Path(tmp) / "good.json"
            good.write_text(json.dumps({"T": 40, "shifts": [{"domain": "A"}]}), encoding="utf-8")
            cfg = load_experiment_config(good)
        self.assertEqual(cfg.T, 40)
        self.assertEqual(cfg.shifts[0].label(), "A")


class SourceTrainingTests(unittest.TestCase):
    def setUp(self):
        self.data = make_shapes(24, seed=0).as_labeled_dataset("shape")

    def test_zero_epochs_is_init(self):
        model, curve = train_source_classifier(self.data, 3, SourceTrainConfig(epochs=0, seed=4))
        self.assertEqual(curve, [])
        self.assertEqual(model.checksum(), build_classifier(3, seed=4).checksum())

    def test_deterministic(self):
        cfg = SourceTrainConfig(epochs=2, batch_size=8, seed=1)
        a, ca = train_source_classifier(self.data, 3, cfg)
        b, cb = train_source_classifier(self.data, 3, cfg)
        self.assertEqual(a.checksum(), b.checksum())
        self.assertEqual(ca, cb)
        self.assertEqual(len(ca), 2)

    def test_empty_dataset(self):
        with self.assertRaises(ContractViolation):
            train_source_classifier([], 3)


def tiny_experiment(root: Path, **updates) -> ExperimentConfig:
    fields = dict(
        seeds=[0],
        T=12,
        bench_dir=str(root / "bench"),
        output_dir=str(root / "out"),
        bench=BenchConfig(source_train=48, source_test=12, target_train=24, target_test=12, pretrain=PretrainConfig(epochs=1, batch_size=16)),
        source=SourceTrainConfig(epochs=1, batch_size=16),
        inversion=InversionConfig(steps=3, mean_latent_samples=64),
        finetune=FinetuneConfig(iterations=3),
        nrc=NRCConfig(epochs=1, batch_size=8),
    )
    fields.update(updates)
    return ExperimentConfig(**fields)


class TinyExperimentTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls._tmp = tempfile.TemporaryDirectory()
        cls.root = Path(cls._tmp.name)
        cls.cfg = tiny_experiment(cls.root)
        cls.table = run_experiment(cls.cfg)

    @classmethod
    def tearDownClass(cls):
        cls._tmp.cleanup()

    def test_methods_and_files(self):
        self.assertEqual(self.table.methods(), [SOURCE_ONLY, "sista-base", "sista-prune-zero", FULL_TARGET])
        out = Path(self.cfg.output_dir)
        self.assertTrue((out / RESULTS_FILE).exists())
        trial_dir = out / "trials" / "shape" / "C" / "seed-0"
        result = TrialResult.model_validate_json((trial_dir / TRIAL_RESULT_FILE).read_text(encoding="utf-8"))
        self.assertEqual(sum(result.single_shot_reads.values()), 1)
        self.assertEqual(SyntheticManifest.load(trial_dir / "synthetic_prune-zero").count, 12)
        for row in self.table.rows:
            self.assertGreaterEqual(row.mean, 0.0)
            self.assertLessEqual(row.mean, 100.0)

    def test_rerun_is_deterministic(self):
        again = run_experiment(self.cfg.model_copy(update={"output_dir": str(self.root / "again")}))
        self.assertEqual(again.model_dump(), self.table.model_dump())

    def test_sweep_p_zero_matches_base(self):
        tables = run_sweep(self.cfg, "p", [0])
        self.assertEqual(list(tables), ["p=0"])
        table = tables["p=0"]
        self.assertEqual(table.cell("sista-prune-zero", "C", "shape").mean, table.cell("sista-base", "C", "shape").mean)
        self.assertTrue((Path(self.cfg.output_dir) / "sweep_p_0" / RESULTS_FILE).exists())

    def test_bad_sweep_axis(self):
        with self.assertRaises(ConfigurationError):
            run_sweep(self.cfg, "q", [1])

    def test_failing_stage_is_named_and_logged(self):
        cfg = self.cfg.model_copy(update={"output_dir": str(self.root / "failing")})
        ctx = open_context(cfg)
        try:
            with patch("pipeline.adapt_classifier", side_effect=RuntimeError("boom")):
                with self.assertRaises(StageError) as caught:
                    run_trial(cfg, 0, cfg.tasks[0], cfg.shifts[0], ctx)
            history = stage_history(ctx.session, "shape/C/seed-0")
        finally:
            ctx.session.close()
        self.assertEqual(caught.exception.stage, FULL_TARGET)
        self.assertEqual((history[-1].stage, history[-1].status), (FULL_TARGET, "failed"))
        self.assertIn("boom", history[-1].message)

    def test_missing_bench_without_auto_prepare(self):
        cfg = self.cfg.model_copy(update={"bench_dir": str(self.root / "empty"), "auto_prepare": False})
        with self.assertRaises(ConfigurationError):
            run_trial(cfg, 0, cfg.tasks[0], cfg.shifts[0])

    def test_conditional_mode_reads_one_per_class(self):
        cfg = tiny_experiment(self.root, generator_mode="conditional", example_classes=[0, 2], include_full_target=False, output_dir=str(self.root / "cond"))
        table = run_experiment(cfg)
        self.assertNotIn(FULL_TARGET, table.methods())
        path = Path(cfg.output_dir) / "trials" / "shape" / "C" / "seed-0" / TRIAL_RESULT_FILE
        result = TrialResult.model_validate_json(path.read_text(encoding="utf-8"))
        self.assertEqual(result.single_shot_reads, {"0": 1, "2": 1})

    def test_client_bundle(self):
        trial_dir = Path(self.cfg.output_dir) / "trials" / "shape" / "C" / "seed-0"
        manifest = SyntheticManifest.load(trial_dir / "synthetic_base")
        model = build_classifier(3, seed=0)
        out = export_client_bundle(self.root / "bundle", model, manifest)
        back = SyntheticManifest.load(out / "data")
        self.assertEqual(back.dataset_hash, manifest.dataset_hash)
        self.assertEqual(back.count, 12)
        self.assertTrue((out / "classifier.pt").exists())


@unittest.skipUnless(os.environ.get("SISTA_RUN_SLOW") == "1", "set SISTA_RUN_SLOW=1 for the desk-scale run")
class DeskScaleRunTests(unittest.TestCase):
    def test_single_shot_gain_on_domain_c(self):
        with tempfile.TemporaryDirectory() as tmp:
            cfg = ExperimentConfig(
                seeds=[0, 1, 2],
                T=500,
                strategies=["prune-zero"],
                ratio=50.0,
                finetune=FinetuneConfig(iterations=300),
                nrc=NRCConfig(k=5, expanded=5),
                shifts=[ShiftConfig(domain="C")],
                bench_dir=str(Path(tmp) / "bench"),
                output_dir=str(Path(tmp) / "out"),
            )
            table = run_experiment(cfg)
        src = table.cell(SOURCE_ONLY, "C", "shape")
        sista = table.cell("sista-prune-zero", "C", "shape")
        full = table.cell(FULL_TARGET, "C", "shape")
        self.assertEqual(len(sista.trials), 3)
        self.assertGreaterEqual(sista.mean, src.mean + 5.0, f"source-only {src.trials}, sista {sista.trials}")
        self.assertGreaterEqual(full.mean, sista.mean - 3.0, f"full-target {full.trials}, sista {sista.trials}")


if __name__ == '__main__':
    unittest.main()
