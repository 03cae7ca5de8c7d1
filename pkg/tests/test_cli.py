"""
Unit tests for the command line interface
"""
import math
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

from src import reporting
from src.cli import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, main, parse_sweep
from src.errors import ConfigError, NumericalAbort

SMALL_CONFIG = """\
method: galore-plus
steps: 4
optimizer:
  rank: 4
  interval: 2
model:
  heads: 2
  d_model: 16
  d_k: 8
  d_v: 8
task:
  batch_size: 2
  seq_len: 4
"""


class TestMain(unittest.TestCase):
    """Test cases for main"""

    def setUp(self):
        """Set up test fixtures"""
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)
        self.config = self.root / "run.yaml"
        self.config.write_text(SMALL_CONFIG, encoding="utf-8")

    def test_run_success(self):
        """Test a run with overrides writes its outputs"""
        out = self.root / "out"
        code = main(["--log-level", "WARNING", "run", "--config", str(self.config), "--rank", "2", "--out", str(out)])
        self.assertEqual(code, EXIT_OK)
        self.assertTrue((out / reporting.METRICS_FILE).exists())
        self.assertIn("rank: 2", (out / reporting.CONFIG_FILE).read_text(encoding="utf-8"))

    def test_missing_config_file(self):
        """Test an unreadable config exits with the configuration code"""
        code = main(["--log-level", "WARNING", "run", "--config", str(self.root / "missing.yaml")])
        self.assertEqual(code, EXIT_CONFIG)

    def test_invalid_config(self):
        """Test a validation error exits with the configuration code"""
        self.config.write_text("method: galore-plus\noptimizer:\n  rank: -1\n", encoding="utf-8")
        code = main(["--log-level", "WARNING", "run", "--config", str(self.config)])
        self.assertEqual(code, EXIT_CONFIG)

    def test_usage_error(self):
        """Test argument errors exit with the configuration code"""
        with patch("sys.stderr"):
            with self.assertRaises(SystemExit) as ctx:
                main(["run", "--rank", "four"])
        self.assertEqual(ctx.exception.code, EXIT_CONFIG)

    def test_numerical_abort(self):
        """Test a numerical abort exits with its own code"""
        with patch("src.cli.run", side_effect=NumericalAbort(3, math.nan)):
            code = main(["--log-level", "WARNING", "run", "--config", str(self.config), "--out", str(self.root / "x")])
        self.assertEqual(code, EXIT_NUMERICAL)

    def test_compare_sweep(self):
        """Test a method comparison from the command line"""
        out = self.root / "cmp"
        code = main([
            "--log-level", "WARNING", "compare", "--config", str(self.config),
            "--sweep", "method=galore-rsvd,galore-plus", "--out", str(out),
        ])
        self.assertEqual(code, EXIT_OK)
        self.assertTrue((out / reporting.COMPARISON_FILE).exists())

    def test_compare_needs_two_runs(self):
        """Test a comparison of a single run is a configuration error"""
        code = main(["--log-level", "WARNING", "compare", "--config", str(self.config), "--out", str(self.root / "c")])
        self.assertEqual(code, EXIT_CONFIG)


class TestParseSweep(unittest.TestCase):
    """Test cases for parse_sweep"""

    def test_typed_values(self):
        """Test values are read as YAML scalars"""
        self.assertEqual(parse_sweep("ratio=0,0.006,0.012"), ("ratio", [0, 0.006, 0.012]))
        self.assertEqual(parse_sweep("method=galore-exact,galore-plus"), ("method", ["galore-exact", "galore-plus"]))

    def test_malformed(self):
        """Test sweeps without a field or values"""
        for text in ("ratio", "=1,2", "ratio="):
            with self.subTest(text=text):
                with self.assertRaises(ConfigError):
                    parse_sweep(text)


if __name__ == '__main__':
    unittest.main()
