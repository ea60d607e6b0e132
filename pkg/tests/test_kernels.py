import numpy as np
import pytest

from elastic_rank import kernels
from elastic_rank import _pykernels

BACKENDS = kernels.available_backends()


def test_selected_backend_is_available():
    assert kernels.BACKEND in BACKENDS


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_matmul_matches_hand_products(name):
    mm = BACKENDS[name].matmul
    np.testing.assert_array_equal(mm(np.eye(2), np.array([[3.0, 4.0], [5.0, 6.0]])), [[3, 4], [5, 6]])
    np.testing.assert_array_equal(mm(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])), [[11]])


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_matmul_handles_strided_views(name, rng):
    a = rng.standard_normal((6, 5))
    b = rng.standard_normal((6, 3))
    np.testing.assert_allclose(BACKENDS[name].matmul(a.T, b), a.T @ b, rtol=1e-13, atol=1e-13)
    np.testing.assert_allclose(BACKENDS[name].matmul(a[::2, 1:4], b[1:4, :]), a[::2, 1:4] @ b[1:4, :], atol=1e-13)


def test_matmul_fixed_summation_order(rng):
    # the fallback defines the order: ascending inner index, sequential adds
    a = rng.standard_normal((4, 9))
    b = rng.standard_normal((9, 3))
    expected = np.zeros((4, 3))
    for i in range(4):
        for j in range(3):
            acc = 0.0
            for k in range(9):
                acc = acc + a[i, k] * b[k, j]
            expected[i, j] = acc
    np.testing.assert_array_equal(_pykernels.matmul(a, b), expected)


@pytest.mark.skipif("compiled" not in BACKENDS, reason="extension not built")
@pytest.mark.parametrize("shape", [(1, 1, 1), (7, 33, 5), (32, 16, 16), (3, 0, 4)])
def test_backends_bitwise_equal_matmul(shape, rng):
    m, k, n = shape
    a = rng.standard_normal((m, k))
    b = rng.standard_normal((k, n))
    np.testing.assert_array_equal(BACKENDS["compiled"].matmul(a, b), BACKENDS["python"].matmul(a, b))


@pytest.mark.skipif("compiled" not in BACKENDS, reason="extension not built")
@pytest.mark.parametrize("updated", [True, False])
def test_backends_bitwise_equal_ema(updated, rng):
    states = {}
    for name in ("compiled", "python"):
        i_bar = np.zeros(50)
        u_bar = np.zeros(50)
        stream = np.random.default_rng(7)
        for _ in range(20):
            BACKENDS[name].ema_update(i_bar, u_bar, np.abs(stream.standard_normal(50)), 0.85, 0.7, updated)
        states[name] = (i_bar, u_bar)
    np.testing.assert_array_equal(states["compiled"][0], states["python"][0])
    np.testing.assert_array_equal(states["compiled"][1], states["python"][1])


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_ema_length_mismatch(name):
    with pytest.raises(ValueError):
        BACKENDS[name].ema_update(np.zeros(3), np.zeros(3), np.zeros(2), 0.5, 0.5, True)


_RUN = """
from elastic_rank import BACKEND
from elastic_rank.allocator import AllocatorConfig
from elastic_rank.harness import MethodKind, MethodSpec, PlantedLowRankTask, TrainSettings, prepare_task, run_method
cfg = AllocatorConfig(total_steps=300, t_warmup=50, t_stabilize=100, adjust_interval=25, k=1, b=1, init_rank=2)
data = prepare_task(PlantedLowRankTask(dims=(8, 8, 8), planted_ranks=(1, 3), n_train=128, n_eval=64), 0)
run = run_method(data, MethodSpec(MethodKind.ELASTIC, cfg), TrainSettings(), 0)
print(BACKEND, repr(run.metric), [e.to_dict() for e in run.events])
"""


@pytest.mark.skipif("compiled" not in kernels.available_backends(), reason="extension not built")
def test_training_identical_across_backends():
    import os
    import subprocess
    import sys

    outs = []
    for name in ("python", "compiled"):
        env = {**os.environ, "ELASTIC_RANK_BACKEND": name}
        proc = subprocess.run([sys.executable, "-c", _RUN], env=env, capture_output=True, text=True, check=True)
        backend, rest = proc.stdout.split(" ", 1)
        assert backend == name
        outs.append(rest)
    assert outs[0] == outs[1]
