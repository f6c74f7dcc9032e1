import json
import tempfile
from io import StringIO
from pathlib import Path
from unittest import mock

from django.core.management import call_command
from django.core.management.base import CommandError
from django.db import DatabaseError
from django.test import TestCase, override_settings

from trl3d.models import ExperimentRun
from trl3d.tests.utils import tiny_values, write_config

COMMAND_NAMES = (
    "gen_data",
    "train_classify",
    "train_align",
    "eval_align",
    "eval_depth",
    "eval_camera",
    "gradcheck",
    "ablate",
)


class CommandTests(TestCase):
    def setUp(self) -> None:
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.root = Path(tmp.name)
        patcher = override_settings(TRL3D_RUNS_DIR=self.root / "runs")
        patcher.enable()
        self.addCleanup(patcher.disable)
        self.config_path = write_config(self.root / "run.cfg", tiny_values(self.root))

    def test_gen_data_prints_run_dir_and_summary(self) -> None:
        out = StringIO()
        call_command("gen_data", config=str(self.config_path), stdout=out)
        first_line, rest = out.getvalue().split("\n", 1)
        run = ExperimentRun.objects.get()
        self.assertIn(f"gen_data finished: {run.run_dir}", first_line)
        self.assertEqual(json.loads(rest)["splits"]["test"], 2)

    def test_seed_and_out_overrides(self) -> None:
        call_command("gen_data", config=str(self.config_path), seed=11, out=str(self.root / "other"), stdout=StringIO())
        run = ExperimentRun.objects.get()
        self.assertEqual(int(run.seed), 11)
        self.assertEqual(Path(run.run_dir).parent, self.root / "other")

    def test_library_errors_become_command_errors(self) -> None:
        with self.assertRaisesMessage(CommandError, "DatasetError"):
            call_command("train_classify", config=str(self.config_path), stdout=StringIO())
        self.assertEqual(ExperimentRun.objects.get().status, ExperimentRun.Status.FAILED)

    def test_unmigrated_database_is_a_command_error(self) -> None:
        with mock.patch(
            "trl3d.management.commands._experiment.run_experiment",
            side_effect=DatabaseError("no such table: experiment_runs\nSQL follows"),
        ):
            with self.assertRaisesMessage(CommandError, "DatabaseError: no such table: experiment_runs"):
                call_command("gen_data", config=str(self.config_path), stdout=StringIO())

    def test_manifest_missing_a_split_key_is_a_command_error(self) -> None:
        call_command("gen_data", config=str(self.config_path), stdout=StringIO())
        manifest_path = self.root / "synth" / "manifest.json"
        manifest = json.loads(manifest_path.read_text())
        del manifest["splits"]["train"]["blob"]
        manifest_path.write_text(json.dumps(manifest))
        with self.assertRaisesMessage(CommandError, "DatasetError: corrupt manifest: split train is missing blob"):
            call_command("train_classify", config=str(self.config_path), stdout=StringIO())

    def test_bad_config_is_a_command_error(self) -> None:
        path = write_config(self.root / "bad.cfg", {"epochs": "3"})
        with self.assertRaisesMessage(CommandError, "ConfigError: unknown config key(s): epochs"):
            call_command("gen_data", config=str(path), stdout=StringIO())
        with self.assertRaisesMessage(CommandError, "config file not found"):
            call_command("gen_data", config=str(self.root / "absent.cfg"), stdout=StringIO())
        self.assertFalse(ExperimentRun.objects.exists())

    def test_async_queues_the_task(self) -> None:
        out = StringIO()
        with mock.patch("trl3d.management.commands._experiment.run_experiment_task") as task:
            task.delay.return_value.id = "abc-123"
            call_command("train_align", "--async", config=str(self.config_path), seed=4, stdout=out)
        task.delay.assert_called_once_with("train_align", str(self.config_path), None, 4)
        self.assertIn("train_align task queued with ID: abc-123", out.getvalue())
        self.assertFalse(ExperimentRun.objects.exists())

    def test_every_command_is_registered(self) -> None:
        for name in COMMAND_NAMES:
            with mock.patch("trl3d.management.commands._experiment.run_experiment_task") as task:
                task.delay.return_value.id = name
                call_command(name, "--async", stdout=StringIO())
            task.delay.assert_called_once_with(name, None, None, None)
