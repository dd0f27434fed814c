import json
import os
import subprocess
import sys

import numpy as np
import pytest

from dacal import _kernels
from dacal._accel import HAS_NUMBA

PROBE = r"""
import hashlib, json, sys
import numpy as np
from dacal import backend
from dacal._kernels import kth_distance_kernel, pav
from dacal.calibrator import compose
from dacal.cli import main
from dacal.knn import build_indices
from dacal.synth import benchmark_config, generate

rng = np.random.default_rng(0)
ref = rng.standard_normal((700, 8)).astype(np.float32)
ref /= np.linalg.norm(ref, axis=1, keepdims=True)
q = np.vstack([ref[:50], rng.standard_normal((150, 8)).astype(np.float32)])
dist = kth_distance_kernel(ref, q, 7)
iso = pav(rng.standard_normal(500), rng.uniform(0.5, 2, 500))
sp = generate(benchmark_config(seed=1, n_train=500, n_val=200, n_test=200, n_ood=0))
indices = build_indices(sp["train"], {n: 10 for n in sp["train"].layer_names})
model, _ = compose("ts+dac", sp["val"], indices=indices)
probs = model.predict_proba(sp["severity_4"], indices)
out = sys.argv[1]
code = main(["synth", "--out", out, "--n-train", "300", "--n-val", "100", "--n-test", "100", "--k", "5"])
code += main(["fit", "--manifest", out + "/manifest.json", "--method", "ets+dac", "--out", out + "/fit"])
print(json.dumps({
    "backend": backend(),
    "knn": hashlib.sha256(dist.tobytes()).hexdigest(),
    "pav": hashlib.sha256(iso.tobytes()).hexdigest(),
    "probs": hashlib.sha256(probs.tobytes()).hexdigest(),
    "model": open(out + "/fit/model.json").read(),
    "cli": code,
}))
"""


def run_probe(flag, out):
    env = dict(os.environ, DACAL_DISABLE_NUMBA=flag)
    proc = subprocess.run([sys.executable, "-c", PROBE, str(out)], env=env, capture_output=True, text=True,
                          timeout=600)
    assert proc.returncode == 0, proc.stderr
    return json.loads(proc.stdout.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def probes(tmp_path_factory):
    root = tmp_path_factory.mktemp("backends")
    return {flag: run_probe(flag, root / flag) for flag in ("0", "1")}


class TestBackendSelection:
    def test_flag_selects_numpy(self, probes):
        assert probes["1"]["backend"] == "numpy"
        assert probes["1"]["cli"] == 0

    def test_default_uses_numba_when_installed(self, probes):
        assert probes["0"]["backend"] == ("numba" if HAS_NUMBA else "numpy")


class TestBackendsAgree:
    @pytest.mark.parametrize("key", ["knn", "pav", "probs", "model"])
    def test_bitwise_identical(self, probes, key):
        assert probes["0"][key] == probes["1"][key]

    @pytest.mark.skipif(not HAS_NUMBA, reason="numba not installed")
    def test_in_process_kernels(self, rng):
        for _ in range(20):
            n, d = int(rng.integers(1, 300)), int(rng.integers(1, 12))
            ref = rng.standard_normal((n, d)).astype(np.float32)
            q = rng.standard_normal((int(rng.integers(1, 40)), d)).astype(np.float32)
            k = int(rng.integers(1, n + 1))
            np.testing.assert_array_equal(_kernels._kth_distance_numba(ref, q, k),
                                          _kernels._kth_distance_numpy(ref, q, k))
