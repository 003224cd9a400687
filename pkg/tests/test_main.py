import argparse
import os
import unittest
from unittest.mock import MagicMock, patch

import pytest

from app import config_shared, main
from app.utils.errors import ConfigError, SegmentationError
from app.utils.types import Precision


@pytest.fixture(autouse=True)
def _clean_env():
    with patch.dict(os.environ, {}, clear=True):
        config_shared.get_precision.cache_clear()
        config_shared.get_workers.cache_clear()
        config_shared.get_default_out_dir.cache_clear()
        yield
        config_shared.get_precision.cache_clear()
        config_shared.get_workers.cache_clear()
        config_shared.get_default_out_dir.cache_clear()


def test_parse_boundaries():
    assert main.parse_boundaries("3, 8") == (3, 8)
    for bad in ("3", "a,b", "1,2,3"):
        with pytest.raises(argparse.ArgumentTypeError):
            main.parse_boundaries(bad)


def test_parse_configs():
    assert main.parse_configs("All, L>M,") == ["All", "L>M"]
    with pytest.raises(argparse.ArgumentTypeError):
        main.parse_configs(" , ")


class TestMain(unittest.TestCase):
    def setUp(self):
        patcher = patch("app.main.attach_run_log", return_value=MagicMock())
        self.mock_run_log = patcher.start()
        self.addCleanup(patcher.stop)
        detach = patch("app.main.detach_run_log")
        self.mock_detach = detach.start()
        self.addCleanup(detach.stop)

    @patch("app.main.start_metrics_server", return_value=False)
    def test_flags_reach_the_command(self, mock_server):
        command = MagicMock()
        with patch.dict(main.COMMANDS, {"probe": command}):
            status = main.main(
                ["probe", "--seed", "4", "--out", "runs/t", "--precision", "f32", "--workers", "2"]
            )
        self.assertEqual(status, 0)
        config = command.call_args.args[0]
        self.assertEqual((config.seed, config.out_dir, config.workers), (4, "runs/t", 2))
        self.assertIs(config.precision, Precision.F32)
        mock_server.assert_called_once()
        self.mock_run_log.assert_called_once_with("runs/t", "probe")
        self.mock_detach.assert_called_once()

    @patch("app.main.start_metrics_server", return_value=False)
    def test_finetune_flags(self, _):
        command = MagicMock()
        with patch.dict(main.COMMANDS, {"finetune": command}):
            main.main(["finetune", "--boundaries", "2,7", "--configs", "Middle,M>U"])
        config = command.call_args.args[0]
        self.assertEqual(config.finetune.boundaries, (2, 7))
        self.assertEqual(config.finetune.configs, ("Middle", "M→U"))

    @patch("app.main.start_metrics_server", return_value=False)
    def test_lab_errors_exit_with_one(self, _):
        for error in (SegmentationError("flat curve"), OSError("read-only"), ValueError("bad")):
            command = MagicMock(side_effect=error)
            with patch.dict(main.COMMANDS, {"report": command}):
                self.assertEqual(main.main(["report"]), 1)

    @patch("app.main.start_metrics_server", return_value=False)
    def test_invalid_override_exits_with_one(self, _):
        command = MagicMock()
        with patch.dict(main.COMMANDS, {"finetune": command}):
            self.assertEqual(main.main(["finetune", "--configs", "Sideways"]), 1)
            self.assertEqual(main.main(["finetune", "--boundaries", "0,40"]), 1)
        command.assert_not_called()

    def test_missing_config_file(self):
        with patch.dict(main.COMMANDS, {"generate": MagicMock()}):
            self.assertEqual(main.main(["generate", "--config", "/nonexistent/exp.json"]), 1)

    def test_usage_errors_exit_with_two(self):
        usage = ([], ["train"], ["probe", "--precision", "f16"], ["probe", "--boundaries", "x"])
        for argv in usage:
            with self.assertRaises(SystemExit) as ctx:
                main.main(argv)
            self.assertEqual(ctx.exception.code, 2)

    def test_every_command_is_wired(self):
        self.assertEqual(
            list(main.COMMANDS), ["generate", "train-base", "probe", "finetune", "report"]
        )
        parser = main.build_parser()
        self.assertEqual(parser.parse_args(["train-base"]).command, "train-base")


@patch("app.main.start_metrics_server", return_value=False)
def test_command_log_lands_in_run_directory(_, tmp_path):
    def command(config):
        main.logger.info("inside %s", config.out_dir)

    with patch.dict(main.COMMANDS, {"report": command}):
        assert main.main(["report", "--out", str(tmp_path)]) == 0
    text = (tmp_path / "logs" / "report.log").read_text(encoding="utf-8")
    assert "inside" in text
    assert "report finished" in text


def test_config_error_is_a_value_error():
    assert issubclass(ConfigError, ValueError)


if __name__ == "__main__":
    unittest.main()
