import numpy as np
import pytest

from setofsets import genome, taskbed
from setofsets.network import Architecture, ReferenceNet, TrainHyper


def random_net(sizes, seed=0, activation="relu", scale=0.5):
    arch = Architecture(tuple(sizes), activation)
    rng = np.random.default_rng(seed)
    return ReferenceNet(arch, scale * rng.standard_normal(arch.n_params))


def dense_oracle(net, keep, x):
    """Loop-based forward pass that knows nothing about the flat layout
    beyond the documented (fan_out, fan_in + 1) row-major blocks."""
    sizes = net.arch.layer_sizes
    theta = [p if k else 0.0 for p, k in zip(net.params.tolist(), keep)]
    a = list(map(float, x))
    pos = 0
    for layer in range(len(sizes) - 1):
        fan_in, fan_out = sizes[layer], sizes[layer + 1]
        out = []
        for j in range(fan_out):
            row = theta[pos + j * (fan_in + 1): pos + (j + 1) * (fan_in + 1)]
            z = sum(w * v for w, v in zip(row[:fan_in], a)) + row[fan_in]
            if layer < len(sizes) - 2:
                z = max(z, 0.0) if net.arch.activation == "relu" else float(np.tanh(z))
            out.append(z)
        pos += (fan_in + 1) * fan_out
        a = out
    return np.array(a)


@pytest.fixture(scope="session")
def small_suite():
    spec = taskbed.SuiteSpec(samples_per_class=40, cluster_spread=0.5, seed=3)
    return taskbed.generate_suite(spec)


@pytest.fixture(scope="session")
def small_jat(small_suite):
    tasks, data = small_suite
    arch = Architecture((16, 12, 12, 10))
    return taskbed.pretrain_jat(arch, data, TrainHyper(lr=0.05, lr_decay=0.98, epochs=40, batch_size=16, seed=3))


@pytest.fixture(scope="session")
def small_grouping(small_jat):
    return genome.build_grouping(small_jat.arch)
