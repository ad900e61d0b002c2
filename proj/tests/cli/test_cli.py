"""End-to-end checks of the dysonnet command line: exit codes, CSV layout and reproducibility."""

import csv
import json
import os
import subprocess
import sys
import tempfile
import unittest

EXE = None
CONFIGS = None


def read_csv(path):
    with open(path) as f:
        first = f.readline().strip()
        rows = list(csv.DictReader(f))
    return first, rows


class CliTest(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = self.tmp.name
        self.env = dict(os.environ, DYSONNET_OUTPUT_ROOT=self.root)

    def tearDown(self):
        self.tmp.cleanup()

    def run_cli(self, *args):
        return subprocess.run([EXE, *args], env=self.env, capture_output=True, text=True)

    def write(self, name, text):
        p = os.path.join(self.root, name)
        with open(p, "w") as f:
            f.write(text)
        return p

    def tiny_config(self):
        return self.write("tiny.yaml", """hamiltonian:
  kind: TFIM_LR
  N: 8
  J: 0.5
model:
  d: 3
sampler:
  chains: 8
  samples: 64
optimizer:
  iterations: 4
  warmup: 2
  peak_lr: 0.1
seed: 5
""")

    def test_train_is_reproducible_from_snapshot(self):
        cfg = self.tiny_config()
        r = self.run_cli("train", cfg, "-o", "a", "--deterministic")
        self.assertEqual(r.returncode, 0, r.stderr)
        out = os.path.join(self.root, "a")
        for f in ("config.resolved.yaml", "metrics.csv", "checkpoint.json", "observables.csv"):
            self.assertTrue(os.path.exists(os.path.join(out, f)), f)
        first, rows = read_csv(os.path.join(out, "metrics.csv"))
        self.assertEqual(first, "# schema_version=1")
        self.assertEqual(len(rows), 5)
        self.assertIn("v_score", rows[0])
        self.assertEqual(rows[0]["wall_ms"], "0")

        r = self.run_cli("train", os.path.join(out, "config.resolved.yaml"), "-o", "b", "--deterministic")
        self.assertEqual(r.returncode, 0, r.stderr)
        with open(os.path.join(out, "metrics.csv"), "rb") as fa, \
                open(os.path.join(self.root, "b", "metrics.csv"), "rb") as fb:
            self.assertEqual(fa.read(), fb.read())

        r = self.run_cli("train", cfg, "-o", "c", "--deterministic", "--iterations", "1",
                         "--init", os.path.join(out, "checkpoint.json"))
        self.assertEqual(r.returncode, 0, r.stderr)

    def test_config_errors_exit_1(self):
        bad = self.write("bad.yaml", "model:\n  d: 4\n")
        r = self.run_cli("train", bad)
        self.assertEqual(r.returncode, 1)
        self.assertIn("hamiltonian", r.stderr)
        r = self.run_cli("train", os.path.join(self.root, "missing.yaml"))
        self.assertEqual(r.returncode, 1)
        r = self.run_cli("train", self.tiny_config(), "--init", self.write("junk.json", "{"))
        self.assertEqual(r.returncode, 1)

    def test_nan_parameter_exits_2_and_keeps_checkpoint(self):
        cfg = self.write("nan.yaml", """hamiltonian:
  kind: TFIM_LR
  N: 8
  h: .nan
model:
  d: 3
sampler:
  chains: 8
  samples: 64
optimizer:
  iterations: 3
  peak_lr: 0.1
""")
        r = self.run_cli("train", cfg, "-o", "nan")
        self.assertEqual(r.returncode, 2, r.stderr)
        self.assertTrue(os.path.exists(os.path.join(self.root, "nan", "checkpoint.json")))

    def test_sweep_grid(self):
        r = self.run_cli("sweep", os.path.join(CONFIGS, "sweep_n10.yaml"), "--iterations", "2")
        self.assertEqual(r.returncode, 0, r.stderr)
        first, rows = read_csv(os.path.join(self.root, "sweep_n10", "grid.csv"))
        self.assertEqual(first, "# schema_version=1")
        self.assertEqual(len(rows), 9)
        for row in rows:
            self.assertGreaterEqual(float(row["rel_error"]), 0.0)
            self.assertLess(float(row["energy_ed"]), 0.0)

    def test_ed_reports_degenerate_ground_space(self):
        r = self.run_cli("ed", "--kind", "J1J2", "--n", "12", "--j2", "0.5")
        self.assertEqual(r.returncode, 0, r.stderr)
        self.assertIn("degeneracy 2", r.stdout)

    def test_benchmarks_write_csv(self):
        r = self.run_cli("bench-update", "--ns", "64,128", "--reps", "2", "-o", "bu")
        self.assertEqual(r.returncode, 0, r.stderr)
        first, rows = read_csv(os.path.join(self.root, "bu", "bench_update.csv"))
        self.assertEqual(first, "# schema_version=1")
        self.assertEqual(len(rows), 2)
        r = self.run_cli("bench-sampler", "--ns", "128", "--sweeps", "1", "-o", "bs")
        self.assertEqual(r.returncode, 0, r.stderr)

    def test_validate_exit_codes(self):
        r = self.run_cli("validate", "--quick", "-o", "v")
        self.assertEqual(r.returncode, 0, r.stdout + r.stderr)
        with open(os.path.join(self.root, "v", "validate.json")) as f:
            self.assertTrue(all(s["pass"] for s in json.load(f)["suites"]))
        r = self.run_cli("validate", "--quick", "--corrupt-cache", "-o", "vc")
        self.assertEqual(r.returncode, 3)


if __name__ == "__main__":
    EXE, CONFIGS = sys.argv[1], sys.argv[2]
    unittest.main(argv=sys.argv[:1])
