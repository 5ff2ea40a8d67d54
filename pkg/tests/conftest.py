import numpy as np
import pytest

from landscape import autodiff as ad
from landscape.data import gen_blobs
from landscape.models import Model, ModelSpec
from landscape.params import Entry, Manifest, ParamVector
from landscape.trainer import TrainConfig, train

DESK_SPEC = ModelSpec("mlp", (64,), 10, hidden=10)
DESK_EPOCHS = 50
EARLY_EPOCH = 2
DESK_SEEDS = range(10)


class DeskRun:
    def __init__(self, seed, ckpts):
        self.seed = seed
        self.ckpts = {c.epoch: c for c in ckpts}

    @property
    def init(self):
        return self.ckpts[0]

    @property
    def early(self):
        return self.ckpts[EARLY_EPOCH]

    @property
    def final(self):
        return self.ckpts[DESK_EPOCHS]


@pytest.fixture(scope="session")
def desk_data():
    return gen_blobs(10, 500, 64, 0.3, seed=0)


@pytest.fixture(scope="session")
def desk_model():
    return Model(DESK_SPEC)


@pytest.fixture(scope="session")
def desk_runs(desk_data):
    cfg = dict(lr=0.1, epochs=DESK_EPOCHS, checkpoint_epochs=(1, EARLY_EPOCH, 3, 5, 12))
    return {s: DeskRun(s, train(DESK_SPEC, TrainConfig(seed=s, **cfg), desk_data))
            for s in DESK_SEEDS}


@pytest.fixture(scope="session")
def desk(desk_runs):
    return desk_runs[0]


@pytest.fixture(scope="session")
def tiny_data():
    return gen_blobs(3, 40, 8, 0.5, seed=1)


@pytest.fixture(scope="session")
def tiny():
    spec = ModelSpec("mlp", (8,), 3, hidden=6)
    from landscape.models import build_model
    model, params, bn = build_model(spec, 3)
    return model, params


class QuadraticModel:
    """f(theta) = theta^T A theta / 2, ignoring the batch."""

    class spec:
        use_bn = False
        num_classes = 2

    def __init__(self, a):
        self.a = np.asarray(a, dtype=np.float64)
        self.manifest = Manifest([Entry("q", (self.a.shape[0],))])

    def loss_tensor(self, theta, x, y, bn=None, bn_mode=None, batch_stats=None):
        at = ad.matmul(ad.reshape(theta, (1, -1)), ad.Tensor(self.a))
        return ad.mul(ad.tsum(ad.mul(ad.reshape(at, (-1,)), theta)), 0.5)

    def params(self, values):
        return ParamVector(np.asarray(values, dtype=np.float64), self.manifest)


@pytest.fixture
def quad():
    rng = np.random.default_rng(7)
    b = rng.normal(size=(6, 6))
    return QuadraticModel(b + b.T)


DUMMY_BATCH = (np.zeros((1, 1)), np.zeros(1, dtype=np.int64))
