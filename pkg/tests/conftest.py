import numpy as np
import pytest

from broydenfit import (
    Dataset,
    DatasetEvaluator,
    ExponentialDecayModel,
    LinearModel,
    LogisticModel,
    PolynomialModel,
)


def analytic_jacobian(model, data: Dataset, beta: np.ndarray) -> np.ndarray:
    """Hand-coded residual Jacobian d(y - f)/d(beta) for the built-in models.

    Test-side reference only; the optimizer never sees these derivatives.
    """
    x = data.x[:, 0] if data.x.shape[1] == 1 else data.x
    if isinstance(model, LinearModel):
        cols = [np.ones(data.m)] + [data.x[:, j] for j in range(data.d)]
        dfdb = np.column_stack(cols)
    elif isinstance(model, PolynomialModel):
        dfdb = np.column_stack([x**j for j in range(model.degree + 1)])
    elif isinstance(model, ExponentialDecayModel):
        a, b = beta
        e = np.exp(-b * x)
        dfdb = np.column_stack([e, -a * x * e])
    elif isinstance(model, LogisticModel):
        a, b = beta
        e = np.exp(-b * x)
        denom = 1.0 + e
        dfdb = np.column_stack([1.0 / denom, a * x * e / denom**2])
    else:
        raise AssertionError(f"no hand-coded Jacobian for {model!r}")
    return -dfdb


def linear_dataset() -> Dataset:
    return Dataset(x=np.array([[0.0], [1.0], [2.0]]), y=np.array([1.0, 3.0, 5.0]))


def decay_dataset(n_points: int = 20) -> Dataset:
    x = np.linspace(0.0, 3.0, n_points)
    return Dataset(x=x, y=2.5 * np.exp(-1.3 * x))


def corpus():
    """(name, model, dataset, generating beta) for every built-in model kind."""
    rows = []
    rows.append(("linear", LinearModel(), linear_dataset(), np.array([1.0, 2.0])))

    x = np.linspace(-1.0, 2.0, 12)
    beta = np.array([0.5, -1.5])
    poly = PolynomialModel(degree=1)
    rows.append(
        ("polynomial", poly,
         Dataset(x=x, y=np.polynomial.polynomial.polyval(x, beta)), beta)
    )

    rows.append(("exponential-decay", ExponentialDecayModel(), decay_dataset(),
                 np.array([2.5, 1.3])))

    x = np.linspace(-2.0, 2.0, 15)
    beta = np.array([1.8, 2.2])
    logistic = LogisticModel()
    rows.append(
        ("logistic", logistic,
         Dataset(x=x, y=beta[0] / (1.0 + np.exp(-beta[1] * x))), beta)
    )
    return rows


@pytest.fixture
def linear_evaluator():
    return DatasetEvaluator(LinearModel(), linear_dataset())


class ScriptedEvaluator:
    """Returns residuals from a script keyed by call index; counts calls."""

    def __init__(self, script):
        self.script = script
        self.calls = []

    def __call__(self, beta):
        self.calls.append(np.array(beta))
        step = self.script[min(len(self.calls) - 1, len(self.script) - 1)]
        if isinstance(step, Exception):
            raise step
        if callable(step):
            return step(beta)
        return np.asarray(step, dtype=float)


class CountingEvaluator:
    def __init__(self, fn):
        self.fn = fn
        self.count = 0

    def __call__(self, beta):
        self.count += 1
        return self.fn(beta)
