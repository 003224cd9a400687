import unittest

from prometheus_client import REGISTRY

from app.utils import metrics


def _sample(name, **labels):
    value = REGISTRY.get_sample_value(name, labels)
    return 0.0 if value is None else value


class TestMetrics(unittest.TestCase):
    def test_sanitize_label(self):
        self.assertEqual(metrics._sanitize_label("L→M step/1"), "L_M_step_1")
        self.assertEqual(len(metrics._sanitize_label("x" * 100)), 64)

    def test_forward_counter(self):
        before = _sample("probelab_forward_sequences_total")
        metrics.record_forward(5)
        self.assertEqual(_sample("probelab_forward_sequences_total"), before + 5)

    def test_probe_counter_labels(self):
        labels = {"task": "figure", "token_type": "last"}
        before = _sample("probelab_probes_trained_total", **labels)
        metrics.record_probe("figure", "last")
        self.assertEqual(_sample("probelab_probes_trained_total", **labels), before + 1)

    def test_response_gauge(self):
        metrics.record_response_accuracy("word_rec", "M→U", 0.75)
        value = _sample("probelab_response_accuracy", task="word_rec", config="M_U")
        self.assertEqual(value, 0.75)

    def test_finetune_histogram(self):
        before = _sample("probelab_finetune_step_seconds_count", config="Middle")
        metrics.record_finetune_step("Middle", 2.5)
        after = _sample("probelab_finetune_step_seconds_count", config="Middle")
        self.assertEqual(after, before + 1)

    def test_output_metrics(self):
        ok = _sample("probelab_artifact_writes_total", kind="curve")
        failed = _sample("probelab_artifact_failures_total", kind="curve")
        metrics.record_output_metrics("curve", success=True, duration_sec=0.01)
        metrics.record_output_metrics("curve", success=False, duration_sec=0.02)
        self.assertEqual(_sample("probelab_artifact_writes_total", kind="curve"), ok + 1)
        self.assertEqual(_sample("probelab_artifact_failures_total", kind="curve"), failed + 1)
        self.assertIn("probelab_artifact_write_seconds", metrics.get_prometheus_metrics())


if __name__ == "__main__":
    unittest.main()
