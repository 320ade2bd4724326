"""Label/prediction balanced subsampling.

Rows are filed into K x K cells by (predicted class of the spurious-feature
model, true label).  A matched batch takes the same number of rows from every
cell, so inside the batch the label is exactly independent of the prediction:
P(Y = k | pred = j) = 1/K for all j, k.  This emulates an intervention that
cuts the dependence between the label and whatever feature the predictor uses.
"""

from dataclasses import dataclass, field

import numpy as np

_EMPTY = np.zeros(0, dtype=np.int64)


@dataclass
class MatchedBatch:
    index: np.ndarray
    pred: np.ndarray
    label: np.ndarray

    def table(self, K):
        t = np.zeros((K, K), dtype=np.int64)
        np.add.at(t, (self.pred, self.label), 1)
        return t


@dataclass
class MatchBuffer:
    """Reservoirs of row indices per (prediction, label) cell.

    ``capacity`` bounds each cell (oldest entries are dropped first); 0 means
    unbounded.  Entries keep the prediction made when they were inserted.
    """

    K: int
    threshold: int = 32
    capacity: int = 0
    cells: list = field(default=None, repr=False)

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("need at least two classes")
        if self.threshold < 1:
            raise ValueError("threshold must be >= 1")
        if self.capacity and self.capacity < self.threshold:
            raise ValueError("capacity must be at least the threshold")
        if self.cells is None:
            self.cells = [[_EMPTY for _ in range(self.K)] for _ in range(self.K)]

    def sizes(self):
        return np.array([[len(c) for c in row] for row in self.cells])

    def push(self, index, pred, label):
        index = np.asarray(index, dtype=np.int64)
        cell_id = np.asarray(pred, dtype=np.int64) * self.K + np.asarray(label, dtype=np.int64)
        order = np.argsort(cell_id, kind="stable")
        bounds = np.searchsorted(cell_id[order], np.arange(self.K * self.K + 1))
        for c in range(self.K * self.K):
            lo, hi = bounds[c], bounds[c + 1]
            if lo == hi:
                continue
            new = index[order[lo:hi]]
            j, k = divmod(c, self.K)
            if self.capacity and len(new) >= self.capacity:
                self.cells[j][k] = new[-self.capacity :]
                continue
            cell = np.concatenate([self.cells[j][k], new])
            if self.capacity and len(cell) > self.capacity:
                cell = cell[-self.capacity :]
            self.cells[j][k] = cell

    def ready(self):
        return all(len(c) >= self.threshold for row in self.cells for c in row)

    def clear(self):
        self.cells = [[_EMPTY for _ in range(self.K)] for _ in range(self.K)]


def matched_subsample(buffer, rng):
    """Emit ``threshold`` rows from every cell, or None when some cell is short.

    Rows are drawn uniformly without replacement and removed from the buffer;
    the rest of each cell keeps its arrival order.
    """
    if not buffer.ready():
        return None
    t = buffer.threshold
    idx, pred, label = [], [], []
    for j in range(buffer.K):
        for k in range(buffer.K):
            cell = buffer.cells[j][k]
            take = rng.choice(len(cell), size=t, replace=False)
            keep = np.ones(len(cell), dtype=bool)
            keep[take] = False
            idx.append(cell[np.sort(take)])
            buffer.cells[j][k] = cell[keep]
            pred.append(np.full(t, j))
            label.append(np.full(t, k))
    return MatchedBatch(np.concatenate(idx), np.concatenate(pred), np.concatenate(label))
