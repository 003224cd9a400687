import os
import unittest
from unittest.mock import patch

from app import config_shared
from app.utils import config_utils
from app.utils.types import Precision

GETTERS = (
    config_shared.get_log_level,
    config_shared.get_log_format,
    config_shared.get_structured_logging,
    config_shared.get_metrics_enabled,
    config_shared.get_metrics_port,
    config_shared.get_workers,
    config_shared.get_precision,
    config_shared.get_feature_spill_mb,
    config_shared.get_default_out_dir,
)


class TestConfigShared(unittest.TestCase):
    def setUp(self):
        for getter in GETTERS:
            getter.cache_clear()

    tearDown = setUp

    @patch.dict(os.environ, {}, clear=True)
    def test_defaults(self):
        self.assertEqual(config_shared.get_log_level(), "INFO")
        self.assertEqual(config_shared.get_log_format(), "text")
        self.assertFalse(config_shared.get_metrics_enabled())
        self.assertEqual(config_shared.get_metrics_port(), 8000)
        self.assertEqual(config_shared.get_workers(), 1)
        self.assertIs(config_shared.get_precision(), Precision.F64)
        self.assertEqual(config_shared.get_feature_spill_mb(), 256)
        self.assertEqual(config_shared.get_default_out_dir(), "runs/default")

    @patch.dict(
        os.environ,
        {"LOG_LEVEL": "debug", "PROBE_LAB_PRECISION": "F32", "METRICS_ENABLED": "yes"},
    )
    def test_environment_values(self):
        self.assertEqual(config_shared.get_log_level(), "DEBUG")
        self.assertIs(config_shared.get_precision(), Precision.F32)
        self.assertTrue(config_shared.get_metrics_enabled())

    @patch.dict(os.environ, {"PROBE_LAB_WORKERS": "0"})
    def test_workers_must_be_positive(self):
        with self.assertRaises(ValueError):
            config_shared.get_workers()

    @patch.dict(os.environ, {"PROBE_LAB_WORKERS": "many"})
    def test_workers_must_be_an_integer(self):
        with self.assertRaises(ValueError):
            config_shared.get_workers()

    @patch.dict(os.environ, {"METRICS_PORT": "http"})
    def test_invalid_metrics_port(self):
        with self.assertRaises(ValueError):
            config_shared.get_metrics_port()

    @patch.dict(os.environ, {"PROBE_LAB_PRECISION": "f16"})
    def test_invalid_precision(self):
        with self.assertRaises(ValueError):
            config_shared.get_precision()


class TestConfigUtils(unittest.TestCase):
    @patch.dict(os.environ, {}, clear=True)
    def test_get_config_value_default(self):
        self.assertEqual(config_utils.get_config_value("NON_EXISTENT_KEY", "default"), "default")

    @patch.dict(os.environ, {"TEST_BOOL": "true"})
    def test_get_config_bool_true(self):
        self.assertTrue(config_utils.get_config_bool("TEST_BOOL", False))

    @patch.dict(os.environ, {"TEST_BOOL": "off"})
    def test_get_config_bool_false(self):
        self.assertFalse(config_utils.get_config_bool("TEST_BOOL", True))

    @patch.dict(os.environ, {"N": " 12 ", "BAD": "1.5", "LOW": "-1"})
    def test_get_config_int(self):
        self.assertEqual(config_utils.get_config_int("N", 3), 12)
        self.assertEqual(config_utils.get_config_int("UNSET_INT", 3), 3)
        with self.assertRaises(ValueError):
            config_utils.get_config_int("BAD", 3)
        with self.assertRaises(ValueError):
            config_utils.get_config_int("LOW", 3, minimum=0)

    @patch("app.utils.config_utils.load_dotenv", return_value=True)
    def test_dotenv_is_loaded_once_per_path(self, mock_load):
        config_utils.load_env_file.cache_clear()
        self.assertTrue(config_utils.load_env_file("custom.env"))
        config_utils.load_env_file("custom.env")
        mock_load.assert_called_once_with("custom.env", override=False)
        config_utils.load_env_file.cache_clear()


if __name__ == "__main__":
    unittest.main()
