"""
Тесты командной строки: коды выхода и вывод
"""

import contextlib
import io
import json
import tempfile
import unittest
from pathlib import Path

import main
from mqbench.export import SAMPLES_COLUMNS
from mqbench.parser import find_summaries
from mqbench.transport import reset_loopback

LOOPBACK_EXPERIMENT = {
    "scenario": "throughput_pairs",
    "transport_kind": "loopback",
    "endpoint": "loopback://0",
    "pairs": 1,
    "rate_per_publisher": 20.0,
    "payload_bytes": 64,
    "duration_s": 0.3,
    "warmup_s": 0.0,
}


def run_cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main.cli_main(["--log-level", "WARNING", *argv])
    return code, out.getvalue(), err.getvalue()


class TestCli(unittest.TestCase):

    def setUp(self):
        reset_loopback()
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def _write_config(self, data) -> str:
        path = self.root / "run.json"
        path.write_text(json.dumps(data), encoding="utf-8")
        return str(path)

    def _loopback_config(self, **experiment):
        return self._write_config({
            "experiment": {**LOOPBACK_EXPERIMENT, **experiment},
            "broker": {"name": "mini", "engine": "inprocess"},
            "monitor": {"interval_s": 0.1},
            "out": str(self.root / "results"),
        })

    # ---- роли ----

    def test_pub_rejects_small_payload(self):
        code, _, err = run_cli("pub", "--transport", "loopback", "--endpoint", "loopback://0",
                               "--topic", "bench/0", "--rate", "10", "--payload", "10",
                               "--duration", "1")
        self.assertEqual(code, main.EXIT_INVALID)
        self.assertIn("invalid: payload_bytes ≥ 24", err)

    def test_pub_rejects_unsupported_qos(self):
        code, _, err = run_cli("pub", "--transport", "loopback", "--endpoint", "loopback://0",
                               "--topic", "t", "--rate", "10", "--payload", "64",
                               "--duration", "1", "--qos", "1")
        self.assertEqual(code, main.EXIT_INVALID)
        self.assertIn("UnsupportedQoS", err)

    def test_pub_loopback(self):
        code, out, _ = run_cli("pub", "--transport", "loopback", "--endpoint", "loopback://0",
                               "--topic", "bench/0", "--rate", "20", "--payload", "64",
                               "--duration", "0.3")
        self.assertEqual(code, main.EXIT_OK)
        lines = dict(line.split("=", 1) for line in out.splitlines())
        self.assertGreater(int(lines["published"]), 0)
        self.assertEqual(lines["errors"], "0")

    def test_sub_writes_csv(self):
        target = self.root / "samples.csv"
        code, out, _ = run_cli("sub", "--transport", "loopback", "--endpoint", "loopback://0",
                               "--topic", "bench/0", "--duration", "0.2", "--out", str(target))
        self.assertEqual(code, main.EXIT_OK)
        self.assertIn("received=0", out)
        self.assertEqual(target.read_text(encoding="utf-8").strip(), ",".join(SAMPLES_COLUMNS))

    # ---- прогоны ----

    def test_run_and_report(self):
        code, out, _ = run_cli("run", "--config", self._loopback_config())
        self.assertEqual(code, main.EXIT_OK)
        self.assertIn("throughput_pairs/loopback pairs=1", out)
        self.assertIn("artifacts=", out)
        summaries = find_summaries(self.root / "results")
        self.assertEqual(len(summaries), 1)
        self.assertEqual(summaries[0].parent, self.root / "results" / "throughput_pairs" / "mini" / "1")

        code, out, _ = run_cli("report", "--in", str(self.root / "results"), "--format", "csv")
        self.assertEqual(code, main.EXIT_OK)
        self.assertEqual(len(out.strip().splitlines()), 2)

        code, out, _ = run_cli("report", "--in", str(summaries[0]), "--format", "json")
        self.assertEqual(json.loads(out)["spec"]["pairs"], 1)

    def test_run_invalid_experiment(self):
        code, _, err = run_cli("run", "--config", self._loopback_config(pairs=0))
        self.assertEqual(code, main.EXIT_INVALID)
        self.assertIn("pairs ≥ 1", err)

    def test_run_rejects_mistyped_field(self):
        code, _, err = run_cli("run", "--config", self._loopback_config(pairs="10"))
        self.assertEqual(code, main.EXIT_INVALID)
        self.assertIn("config error", err)
        self.assertIn("pairs", err)

    def test_run_needs_config_or_preset(self):
        code, _, err = run_cli("run")
        self.assertEqual(code, main.EXIT_INVALID)
        self.assertIn("config error", err)

    def test_missing_config_file(self):
        code, _, _ = run_cli("run", "--config", str(self.root / "absent.json"))
        self.assertEqual(code, main.EXIT_INVALID)

    def test_unknown_config_section(self):
        path = self._write_config({"experiment": LOOPBACK_EXPERIMENT, "brokers": {}})
        code, _, err = run_cli("sweep", "--config", path, "--axis", "pairs", "--values", "1")
        self.assertEqual(code, main.EXIT_INVALID)
        self.assertIn("brokers", err)

    def test_sweep_values_must_be_integers(self):
        code, _, _ = run_cli("sweep", "--config", self._loopback_config(), "--axis", "pairs",
                             "--values", "1,two")
        self.assertEqual(code, main.EXIT_INVALID)

    def test_sweep_loopback(self):
        code, out, _ = run_cli("sweep", "--config", self._loopback_config(), "--axis",
                               "payload_bytes", "--values", "64,128")
        self.assertEqual(code, main.EXIT_OK)
        self.assertIn("payload=64", out)
        self.assertIn("payload=128", out)
        self.assertEqual(len(find_summaries(self.root / "results")), 2)

    def test_report_without_summaries(self):
        code, _, err = run_cli("report", "--in", str(self.root))
        self.assertEqual(code, main.EXIT_RUNTIME)
        self.assertIn("summary.json", err)


if __name__ == "__main__":
    unittest.main()
