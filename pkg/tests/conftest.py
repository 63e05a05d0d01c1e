import os

import numpy as np
import pytest

from nnfrag import engine


def fd_grad(f, x, h=1e-5):
    """Central finite-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def random_smooth_net(seed, d=6, hidden=(5,), classes=3, beta=2.0, input_shape=None):
    spec = []
    if input_shape is not None:
        spec.append("flatten")
    for h in hidden:
        spec += [("dense", h), "relu"]
    spec.append(("dense", classes))
    m = engine.build(spec, input_shape or (d,), seed=seed)
    return m.smooth(beta)


def random_conv_net(seed, beta=2.0):
    spec = [("conv", 3, 3, 2, 1), "relu", ("conv", 2, 2, 1, 0), "relu", "flatten", ("dense", 3)]
    return engine.build(spec, (2, 6, 6), seed=seed).smooth(beta)


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    """Directory with MNIST IDX files.

    Uses ``$NNFRAG_DATA/mnist`` when present, else converts the 5000-digit
    sample bundled with mlxtend.
    """
    root = os.environ.get("NNFRAG_DATA")
    if root and os.path.exists(os.path.join(root, "mnist", "t10k-images-idx3-ubyte")):
        return os.path.join(root, "mnist")
    from nnfrag import data

    out = tmp_path_factory.mktemp("mnist")
    try:
        data.write_mnist_sample(out)
    except ImportError:
        pytest.skip("no MNIST data: set NNFRAG_DATA or install mlxtend")
    return str(out)


@pytest.fixture(scope="session")
def mnist_model(mnist_dir):
    """(model, train set, test set) for the small MNIST MLP used by the campaigns."""
    from nnfrag import data, harness

    train = data.load_mnist(mnist_dir, "train")
    test = data.load_mnist(mnist_dir, "test")
    return harness.train_preset("mlp_small", train, seed=0), train, test


ACCEPTANCE_LINES = []


class _Criterion:
    def __init__(self, name):
        self.name = name
        self.done = False

    def __call__(self, ok, detail=""):
        self.done = True
        line = f"{'PASS' if ok else 'FAIL'}  {self.name}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    def skip(self, reason):
        self.done = True
        ACCEPTANCE_LINES.append(f"SKIP  {self.name}  {reason}")
        pytest.skip(reason)


@pytest.fixture
def criterion(request):
    """Recorder for one acceptance criterion; prints a single pass/fail line."""
    rec = _Criterion(request.node.name.removeprefix("test_"))
    yield rec
    if not rec.done:
        ACCEPTANCE_LINES.append(f"FAIL  {rec.name}  (raised before a verdict)")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
