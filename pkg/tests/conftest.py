import numpy as np
import pytest

from tdm import fixture_path
from tdm.dimension import Dimension, KeyType
from tdm.tensor import TypedTensor, ValueType

TOY_USERS = ["u1", "u2", "u3"]
TOY_TWEETS = [f"t{i}" for i in range(1, 9)]
TOY_DAYS = ["18-03-08", "18-03-07", "18-02-28", "18-02-26"]
# (user, tweet, day) triples of the bundled toy corpus
TOY_POSTS = [
    ("u3", "t1", "18-03-08"),
    ("u1", "t2", "18-03-07"),
    ("u1", "t3", "18-02-28"),
    ("u2", "t4", "18-02-26"),
    ("u1", "t5", "18-02-26"),
    ("u2", "t6", "18-03-08"),
    ("u3", "t7", "18-03-07"),
    ("u1", "t8", "18-03-08"),
]


def string_dims(shape, prefix="d"):
    return [
        Dimension(f"{prefix}{n + 1}", KeyType.STRING, [f"k{n + 1}_{i + 1}" for i in range(s)])
        for n, s in enumerate(shape)
    ]


def random_sparse(rng, shape, density=0.3, value_type="integer", default=0, name="x"):
    """Random tensor plus its dense shadow array."""
    vt = ValueType(value_type)
    mask = rng.random(shape) < density
    if vt is ValueType.INTEGER:
        vals = rng.integers(-5, 6, size=shape)
    elif vt is ValueType.REAL:
        vals = rng.normal(size=shape)
    else:
        vals = rng.random(shape) < 0.5
    dense = np.where(mask, vals, default).astype(vt.dtype)
    data = {tuple(int(i) for i in c): dense[tuple(c)].item() for c in np.argwhere(mask)}
    t = TypedTensor(name, string_dims(shape), vt, default, data)
    return t, dense


def publish_dims():
    return [
        Dimension("user", KeyType.STRING, TOY_USERS, alias="U"),
        Dimension("tweet", KeyType.STRING, TOY_TWEETS),
        Dimension("time", KeyType.TIMESTAMP, TOY_DAYS, granularity=86400, alias="T"),
    ]


def publish_tensor():
    t = TypedTensor("publish", publish_dims(), ValueType.INTEGER, 0)
    for post in TOY_POSTS:
        t = t.set(post, 1)
    return t


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def publish():
    return publish_tensor()


@pytest.fixture
def toy_dir():
    return fixture_path("toy")


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
