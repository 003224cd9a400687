import unittest
from unittest.mock import patch

from app import config_shared
from app.utils.metrics_server import start_metrics_server


class TestMetricsServer(unittest.TestCase):
    def setUp(self):
        config_shared.get_metrics_enabled.cache_clear()
        config_shared.get_metrics_port.cache_clear()

    def tearDown(self):
        config_shared.get_metrics_enabled.cache_clear()
        config_shared.get_metrics_port.cache_clear()

    @patch("app.utils.metrics_server.start_http_server")
    @patch.dict("os.environ", {"METRICS_ENABLED": "false"})
    def test_disabled_by_default(self, mock_http):
        self.assertFalse(start_metrics_server())
        mock_http.assert_not_called()

    @patch("app.utils.metrics_server.start_http_server")
    @patch.dict("os.environ", {"METRICS_ENABLED": "true", "METRICS_PORT": "9123"})
    def test_starts_on_configured_port(self, mock_http):
        self.assertTrue(start_metrics_server())
        mock_http.assert_called_once_with(9123)

    @patch("app.utils.metrics_server.start_http_server")
    @patch.dict("os.environ", {"METRICS_ENABLED": "1", "METRICS_PORT": "eighty"})
    def test_bad_port(self, mock_http):
        with self.assertRaises(ValueError):
            start_metrics_server()
        mock_http.assert_not_called()


if __name__ == "__main__":
    unittest.main()
