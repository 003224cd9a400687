import importlib
import logging
import unittest

from app.utils.setup_logger import ROOT_LOGGER, attach_run_log, detach_run_log, setup_logger

logger_module = importlib.import_module("app.utils.setup_logger")


class TestSetupLogger(unittest.TestCase):
    def test_module_loggers_feed_the_package_logger(self):
        logger = setup_logger("app.probing")
        self.assertEqual(logger.name, "app.probing")
        self.assertFalse(logger.handlers)
        self.assertTrue(logger.propagate)
        root = logging.getLogger(ROOT_LOGGER)
        self.assertTrue(root.handlers)
        self.assertFalse(root.propagate)

    def test_foreign_names_are_namespaced(self):
        self.assertEqual(setup_logger("scratch").name, "app.scratch")
        self.assertIs(setup_logger(), logging.getLogger(ROOT_LOGGER))

    def test_plain_formatter_without_json(self):
        formatter = logger_module._formatter(structured=False)
        self.assertEqual(formatter._fmt, logger_module.PLAIN_FORMAT)


def test_run_log_collects_records(tmp_path):
    handler = attach_run_log(tmp_path, "probe")
    try:
        setup_logger("app.pipeline").info("📊 gap %.2f", 0.25)
    finally:
        detach_run_log(handler)
    setup_logger("app.pipeline").info("after detach")
    text = (tmp_path / "logs" / "probe.log").read_text(encoding="utf-8")
    assert "gap 0.25" in text
    assert "after detach" not in text
    assert handler not in logging.getLogger(ROOT_LOGGER).handlers


if __name__ == "__main__":
    unittest.main()
