"""Shared fixtures: the hand-set 2-4-3 network and small random predictive stacks."""
import numpy as np
import pytest

from bayesal import bayes_mlp as bm

W1 = np.array([[0.5, -0.3, 0.8, 0.1], [-0.2, 0.7, 0.4, -0.6]])
B1 = np.array([0.1, -0.1, 0.05, 0.0])
W2 = np.array([[0.3, -0.5, 0.2], [0.6, 0.1, -0.4], [-0.7, 0.2, 0.5], [0.4, 0.3, -0.1]])
B2 = np.array([0.0, 0.1, -0.2])
X_HAND = np.array([1.5, -0.5])

MASK_A = (np.array([[1, 0, 1, 1], [0, 1, 1, 0]], float),
          np.array([[1, 1, 0], [0, 1, 1], [1, 0, 1], [1, 1, 0]], float))
MASK_C = (np.array([[0, 1, 0, 1], [1, 1, 0, 1]], float),
          np.array([[0, 1, 1], [1, 0, 1], [1, 1, 0], [0, 1, 1]], float))

# values from an independent 50-digit evaluation (mpmath) of tanh/softmax
OUT_A = [0.25415439386562073, 0.26382141153811941, 0.48202419459625986]
OUT_ONES = [0.16904365908485182, 0.2865506572734585, 0.54440568364168967]
OUT_C = [0.21941115540407299, 0.40084334600701074, 0.37974549858891628]


@pytest.fixture
def hand_net():
    return bm.ModelParams((W1, W2), (B1, B2))


def random_stack(rng, n, M, J, alpha=1.0):
    """``n`` predictive matrices of shape ``(M, J)`` with Dirichlet rows."""
    return rng.dirichlet(np.full(J, alpha), size=(n, M))


def random_instance(seed):
    """One small pool matrix and test stack with M, J, T <= 5."""
    rng = np.random.default_rng(seed)
    M, J, T = (int(v) for v in rng.integers(1, 6, size=3))
    J = max(J, 2)
    alpha = float(rng.choice([0.2, 1.0, 5.0]))
    return random_stack(rng, 1, M, J, alpha)[0], random_stack(rng, T, M, J, alpha)


def _rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-8)


def gradient_check(seed: int, h: float = 1e-5) -> float:
    """Largest relative error between analytic and central-difference gradients."""
    rng = np.random.default_rng(seed)
    sizes = (int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(2, 6)),
             int(rng.integers(2, 5)))
    p = bm.init_params(sizes, seed=seed, scale=1.5)
    p = bm.ModelParams(p.weights, tuple(rng.normal(scale=0.3, size=b.shape) for b in p.biases))
    mask = bm.sample_masks(p, 1, seed + 1)[0]
    n = int(rng.integers(1, 8))
    X = rng.normal(size=(n, sizes[0]))
    y = rng.integers(0, sizes[-1], size=n)
    l2 = float(rng.choice([0.0, 0.01]))
    _, dW, db = bm.loss_and_grad(p, mask, X, y, l2=l2)

    worst = 0.0
    for kind, arrays, grads in (("w", p.weights, dW), ("b", p.biases, db)):
        for layer, (arr, g) in enumerate(zip(arrays, grads)):
            for idx in np.ndindex(arr.shape):
                def loss_at(delta):
                    moved = [a.copy() for a in arrays]
                    moved[layer][idx] += delta
                    q = (bm.ModelParams(tuple(moved), p.biases) if kind == "w"
                         else bm.ModelParams(p.weights, tuple(moved)))
                    return bm.loss_and_grad(q, mask, X, y, l2=l2)[0]
                num = (loss_at(h) - loss_at(-h)) / (2 * h)
                if abs(num) < 1e-7 and abs(g[idx]) < 1e-7:
                    continue
                worst = max(worst, float(_rel_err(g[idx], num)))
    return worst


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
