"""Chi-square goodness-of-fit check of a learned feature across environments.

For each predicted class k of a model trained in environment e0 we compare the
label distribution among rows predicted k in a validation environment with the
one in e0.  If the feature were causal these conditionals would agree; a
significant difference for any class is evidence the feature is spurious,
which is the cue to switch from ERM to FMI.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .models import predict
from .numerics import chi_square_sf

log = logging.getLogger(__name__)

USE_FMI = "use_FMI"
USE_ERM = "use_ERM"


class EmptyCellError(ValueError):
    """No row of the dataset is predicted as the requested class."""


class ExpectedCellError(ValueError):
    """An expected count n * proportion falls below 1."""


def conditional_table(model, dataset, k):
    """Label counts (length K) among rows whose argmax prediction is ``k``."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    pred = predict(model, dataset.X)
    labels = dataset.y[pred == k]
    if not len(labels):
        raise EmptyCellError(f"no row is predicted as class {k}")
    return np.bincount(labels, minlength=dataset.K)


@dataclass
class GofEntry:
    k: int
    observed: np.ndarray
    expected: np.ndarray  # proportions from the training side
    statistic: float
    df: int
    p_value: float
    n: int
    short: bool = False  # fewer than the requested n validation rows

    def as_dict(self):
        return {
            "k": self.k,
            "observed": [int(v) for v in self.observed],
            "expected": [float(v) for v in self.expected],
            "statistic": self.statistic,
            "df": self.df,
            "p_value": self.p_value,
            "n": self.n,
            "short": self.short,
        }


@dataclass
class GofReport:
    entries: list = field(default_factory=list)
    skipped: dict = field(default_factory=dict)  # class -> reason

    @property
    def p_values(self):
        return [e.p_value for e in self.entries]


def gof_test(train_counts, valid_counts, n=200, rng=None, k=0):
    """Pearson test of validation label counts against training proportions.

    When more than ``n`` validation rows are available, ``n`` are drawn
    without replacement; with fewer, all are used and the entry is flagged.
    """
    train_counts = np.asarray(train_counts, dtype=np.int64)
    valid_counts = np.asarray(valid_counts, dtype=np.int64)
    if train_counts.shape != valid_counts.shape or train_counts.ndim != 1 or len(train_counts) < 2:
        raise ValueError("count vectors must both have length K >= 2")
    if np.any(train_counts < 0) or np.any(valid_counts < 0):
        raise ValueError("counts must be non-negative")
    if train_counts.sum() == 0:
        raise EmptyCellError("training counts are empty")
    total = int(valid_counts.sum())
    if total == 0:
        raise EmptyCellError("validation counts are empty")

    short = total < n
    if short:
        log.warning("only %d validation rows for class %d (wanted %d); using all", total, k, n)
        observed, m = valid_counts, total
    elif total == n:
        observed, m = valid_counts, n
    else:
        rng = rng if rng is not None else np.random.default_rng()
        observed, m = rng.multivariate_hypergeometric(valid_counts, n), n

    proportions = train_counts / train_counts.sum()
    expected = m * proportions
    if np.any(expected < 1):
        raise ExpectedCellError(f"expected counts {expected} fall below 1")
    statistic = float(np.sum((observed - expected) ** 2 / expected))
    df = len(train_counts) - 1
    return GofEntry(k, observed, proportions, statistic, df, chi_square_sf(statistic, df), m, short)


def gof_report(model, train, valid, n=200, rng=None):
    """Run :func:`gof_test` for every predicted class.

    Classes the model never predicts on either side, or whose expected counts
    are too small, are skipped and listed in ``report.skipped``.
    """
    report = GofReport()
    for k in range(train.K):
        try:
            entry = gof_test(conditional_table(model, train, k), conditional_table(model, valid, k), n, rng, k)
        except (EmptyCellError, ExpectedCellError) as exc:
            report.skipped[k] = str(exc)
            continue
        report.entries.append(entry)
    return report


def decide_workflow(report, alpha=0.05):
    """``use_FMI`` if any class rejects at level ``alpha``, else ``use_ERM``."""
    if not report.entries:
        raise ValueError("report has no tested class")
    return USE_FMI if any(e.p_value < alpha for e in report.entries) else USE_ERM
