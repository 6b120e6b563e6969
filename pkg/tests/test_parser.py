"""
Тесты загрузки конфигурации прогона
"""

import json
import os
import tempfile
import unittest
from pathlib import Path
from unittest import mock

from mqbench.core import ConfigError, ScenarioType, TransportKind, validate_spec
from mqbench.parser import load_run_config, parse_run_config, parse_values

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

EXPERIMENT = {
    "scenario": "latency_payload",
    "transport_kind": "mqtt",
    "endpoint": "tcp://127.0.0.1:1883",
}


class TestShippedConfigs(unittest.TestCase):

    def test_every_config_loads_and_validates(self):
        paths = sorted(CONFIGS.glob("*.json"))
        self.assertGreater(len(paths), 0)
        for path in paths:
            with self.subTest(config=path.name):
                config = load_run_config(path)
                self.assertTrue(validate_spec(config.experiment).is_valid)
                self.assertEqual(
                    config.broker.validate(config.experiment.client_count()), [])


class TestParseRunConfig(unittest.TestCase):

    def test_defaults_to_inprocess_broker(self):
        config = parse_run_config({"experiment": EXPERIMENT})
        self.assertEqual(config.broker.engine, "inprocess")
        self.assertIsNone(config.faults)
        self.assertEqual(config.monitor.interval_s, 1.0)

    def test_preset_with_overrides(self):
        config = parse_run_config({"preset": "fanout", "experiment": {"fanout_subscribers": 50}})
        self.assertIs(config.experiment.scenario, ScenarioType.FANOUT)
        self.assertEqual(config.experiment.fanout_subscribers, 50)

    def test_cli_preset_wins(self):
        config = parse_run_config({"preset": "fanout"}, preset="latency_payload")
        self.assertIs(config.experiment.scenario, ScenarioType.LATENCY_PAYLOAD)

    def test_unknown_section(self):
        with self.assertRaises(ConfigError):
            parse_run_config({"experiment": EXPERIMENT, "metrics": {}})

    def test_unknown_experiment_field(self):
        with self.assertRaises(ConfigError):
            parse_run_config({"experiment": {**EXPERIMENT, "threads": 4}})

    def test_bad_transport(self):
        with self.assertRaises(ConfigError):
            parse_run_config({"experiment": {**EXPERIMENT, "transport_kind": "kafka"}})

    def test_empty_config(self):
        with self.assertRaises(ConfigError):
            parse_run_config({})
        with self.assertRaises(ConfigError):
            parse_run_config([])

    def test_monitor_interval_positive(self):
        with self.assertRaises(ConfigError):
            parse_run_config({"experiment": EXPERIMENT, "monitor": {"interval_s": 0}})

    def test_faults_section(self):
        config = parse_run_config({
            "experiment": EXPERIMENT,
            "faults": {"mode": "toxiproxy", "proxy_name": "p", "listen": "127.0.0.1:21883"},
        })
        self.assertEqual(config.faults.mode, "toxiproxy")
        self.assertEqual(config.faults.listen, "127.0.0.1:21883")

    def test_broker_ports_become_tuples(self):
        config = parse_run_config({
            "experiment": EXPERIMENT,
            "broker": {"name": "nats", "image": "nats:2.10", "ports": [[4222, 4222]]},
        })
        self.assertEqual(config.broker.ports, [(4222, 4222)])
        self.assertIs(config.experiment.transport_kind, TransportKind.MQTT)


class TestOutDir(unittest.TestCase):

    def test_precedence(self):
        config = parse_run_config({"experiment": EXPERIMENT, "out": "from_file"})
        with mock.patch.dict(os.environ, {"MQBENCH_OUT": "from_env"}):
            self.assertEqual(config.out_dir("from_cli"), Path("from_cli"))
            self.assertEqual(config.out_dir(), Path("from_file"))
            config.out = None
            self.assertEqual(config.out_dir(), Path("from_env"))
        with mock.patch.dict(os.environ, {}, clear=True):
            self.assertEqual(config.out_dir(), Path("results"))


class TestFiles(unittest.TestCase):

    def test_invalid_json(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "bad.json"
            path.write_text("{experiment", encoding="utf-8")
            with self.assertRaises(ConfigError):
                load_run_config(path)

    def test_round_trip_through_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "run.json"
            path.write_text(json.dumps({"experiment": EXPERIMENT}), encoding="utf-8")
            self.assertEqual(load_run_config(path).experiment.endpoint, "tcp://127.0.0.1:1883")

    def test_parse_values(self):
        self.assertEqual(parse_values("1024,16384, 1048576"), [1024, 16384, 1048576])
        with self.assertRaises(ConfigError):
            parse_values("1,x")


if __name__ == "__main__":
    unittest.main()
