"""
Desk-scale experiments. Minutes of CPU each, so they only run with TRL3D_SLOW_TESTS=1.
"""

import tempfile
import time
from pathlib import Path
from typing import Any, Dict
from unittest import skipUnless

import numpy as np
import pandas as pd
from decouple import config
from django.test import TestCase, override_settings

from trl3d.runconfig import RunConfig, parse_run_config
from trl3d.services import run_experiment
from trl3d.training import build_model
from trl3d.gradcheck import run_gradcheck
from trl3d.tensor import Rng

SLOW_TESTS: bool = config("TRL3D_SLOW_TESTS", default=False, cast=bool)
SEEDS = (0, 1, 2)


@skipUnless(SLOW_TESTS, "set TRL3D_SLOW_TESTS=1 to run desk-scale experiments")
class ExperimentTests(TestCase):
    def setUp(self) -> None:
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.root = Path(tmp.name)
        patcher = override_settings(TRL3D_RUNS_DIR=self.root / "runs")
        patcher.enable()
        self.addCleanup(patcher.disable)

    def config(self, seed: int, **values: Any) -> RunConfig:
        text: Dict[str, str] = {"seed": str(seed), "dataset": str(self.root / f"synth-{seed}")}
        text.update({key: str(value) for key, value in values.items()})
        return parse_run_config(text)

    def test_full_model_gradients(self) -> None:
        started = time.monotonic()
        model = build_model(RunConfig(insert_at=(2,), embed_dim=48))
        results = run_gradcheck(model, RunConfig().gradcheck_samples, Rng(0))
        self.assertTrue(all(r.passed for r in results), [r.group for r in results if not r.passed])
        self.assertLess(time.monotonic() - started, 120.0)

    def test_alignment_depth_and_camera(self) -> None:
        started = time.monotonic()
        seen, unseen, baseline_unseen = [], [], []
        for seed in SEEDS:
            run_experiment("gen_data", self.config(seed))
            trained = run_experiment("train_align", self.config(seed))
            losses = pd.read_csv(trained.run_dir / "tcn_loss.csv")["loss"]
            self.assertLess(losses.iloc[-10:].mean(), losses.iloc[:10].mean())
            aligned = run_experiment("eval_align", self.config(seed, checkpoint=trained.run_dir / "model.ckpt"))
            seen.append(aligned.summary["seen"])
            unseen.append(aligned.summary["unseen"]["alignment_error"])

            plain = run_experiment("train_align", self.config(seed, insert_at=""))
            plain_eval = run_experiment(
                "eval_align", self.config(seed, insert_at="", checkpoint=plain.run_dir / "model.ckpt")
            )
            baseline_unseen.append(plain_eval.summary["unseen"]["alignment_error"])

            depth = run_experiment("eval_depth", self.config(seed, checkpoint=trained.run_dir / "model.ckpt"))
            self.assertGreater(depth.summary["trained"], depth.summary["untrained"])
            self.assertGreater(depth.summary["trained"] - depth.summary["random"], 0.2)
            self.assertTrue(-0.1 <= depth.summary["random"] <= 0.1)

            cameras = run_experiment("eval_camera", self.config(seed, checkpoint=trained.run_dir))
            table = pd.read_csv(cameras.run_dir / "camera_summary.csv")
            for column in ("position_disparity", "orientation_disparity"):
                self.assertLessEqual(table[column].iloc[-1], table[column].iloc[0])
                self.assertLess(table[column].iloc[-1], 0.5)

        self.assertLess(np.mean([s["alignment_error"] for s in seen]), 0.15)
        self.assertGreater(np.mean([s["kendall_tau"] for s in seen]), 0.5)
        self.assertLess(np.mean(unseen), np.mean(baseline_unseen))
        self.assertLess(time.monotonic() - started, 900.0)

    def test_ablation_sweep(self) -> None:
        run_experiment("gen_data", self.config(0))
        ctx = run_experiment("ablate", self.config(0, ablation_seeds="0,1,2"))
        table = pd.read_csv(ctx.run_dir / "ablation.csv")
        self.assertEqual(len(table), 5 * 3)
        self.assertFalse(table.isna().any().any())
        summary = pd.read_csv(ctx.run_dir / "ablation_summary.csv").set_index("variant")
        self.assertGreaterEqual(summary.loc["trl3d", "unseen_accuracy"], summary.loc["baseline", "unseen_accuracy"])

    def test_training_is_reproducible(self) -> None:
        run_experiment("gen_data", self.config(0))
        first = run_experiment("train_align", self.config(0))
        second = run_experiment("train_align", self.config(0))
        for name in first.artifacts:
            self.assertEqual((first.run_dir / name).read_bytes(), (second.run_dir / name).read_bytes(), name)
