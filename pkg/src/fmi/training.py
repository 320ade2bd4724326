"""Training loops: ERM, the test-environment oracle, and FMI.

FMI runs two networks.  The subnetwork is fit by plain ERM and, because ERM
latches on to whatever is most predictive in the training environment, its
predictions track the spurious feature.  Every minibatch is filed into a
:class:`~fmi.matching.MatchBuffer` by (subnetwork prediction, label); whenever
all cells are full enough, a balanced batch is emitted and the main network
takes one step on it.

Strategies:

``together``
    both networks train from step 1; rows are filed with the subnetwork's
    prediction right after its update on the same batch
``warmup_fixed``
    the subnetwork trains alone for ``warm_steps``, is frozen, and then the
    main network trains on matched batches for ``steps``
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .matching import MatchBuffer, matched_subsample
from .models import _backprop, init_model, make_optimizer, predict, sgd_step
from .numerics import make_rng

log = logging.getLogger(__name__)

STRATEGIES = ("together", "warmup_fixed")


class BatchStream:
    """Minibatches drawn by walking seeded permutations (one per epoch).

    ``batch_size <= 0`` or ``>= n`` yields a fresh permutation of every row.
    """

    def __init__(self, n, batch_size, rng):
        self.n = n
        self.full = batch_size <= 0 or batch_size >= n
        self.batch_size = n if self.full else batch_size
        self.rng = rng
        self._perm = np.zeros(0, dtype=np.int64)
        self._pos = 0

    def next(self):
        if self.full:
            return self.rng.permutation(self.n)
        if self._pos + self.batch_size > len(self._perm):
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
        out = self._perm[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return out


@dataclass
class FmiConfig:
    strategy: str = "together"
    steps: int = 5000
    warm_steps: int = 0
    batch_size: int = 64
    threshold: int = 32
    capacity: int = 512
    sub_lr: float = 0.01
    main_lr: float = 0.01
    momentum: float = 0.0
    hidden: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.strategy == "warmup_fixed" and self.warm_steps < 1:
            raise ValueError("warmup_fixed needs warm_steps >= 1")
        self.hidden = tuple(self.hidden)


@dataclass
class TrainTrace:
    step: list = field(default_factory=list)
    sub_risk: list = field(default_factory=list)
    main_risk: list = field(default_factory=list)
    emitted: list = field(default_factory=list)
    tables: list = field(default_factory=list)

    @property
    def n_emissions(self):
        return int(sum(self.emitted))

    def rows(self):
        for s, a, b, e in zip(self.step, self.sub_risk, self.main_risk, self.emitted):
            yield {"step": s, "sub_risk": a, "main_risk": b, "emitted": int(e)}


def _step(model, opt, X, y):
    risk, grads = _backprop(model, X, y)
    return sgd_step(model, grads, opt), risk


def train_erm(train, steps, lr, hidden, rng, batch_size=64, momentum=0.0, checkpoint_every=0, on_checkpoint=None):
    """Minibatch SGD on mean cross-entropy over ``train``."""
    if len(train) == 0:
        raise ValueError("empty training set")
    model = init_model(train.d, hidden, train.K, rng)
    opt = make_optimizer(lr, momentum)
    batches = BatchStream(len(train), batch_size, rng)
    for step in range(1, steps + 1):
        if batches.full:
            # the mean gradient does not depend on row order
            model, _ = _step(model, opt, train.X, train.y)
        else:
            idx = batches.next()
            model, _ = _step(model, opt, train.X[idx], train.y[idx])
        if on_checkpoint and checkpoint_every and step % checkpoint_every == 0:
            on_checkpoint(step, model)
    return model


def train_oracle(test, steps, lr, hidden, rng, **kwargs):
    """ERM fit directly on data from the evaluation environment."""
    return train_erm(test, steps, lr, hidden, rng, **kwargs)


def train_fmi(train, cfg, checkpoint_every=0, on_checkpoint=None):
    """Return ``(main, sub, trace)``.

    ``on_checkpoint(step, main, sub)`` is called every ``checkpoint_every``
    main-phase steps.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    rng = make_rng(cfg.seed)
    K = train.K
    sub = init_model(train.d, cfg.hidden, K, rng)
    main = init_model(train.d, cfg.hidden, K, rng)
    sub_opt = make_optimizer(cfg.sub_lr, cfg.momentum)
    main_opt = make_optimizer(cfg.main_lr, cfg.momentum)
    batches = BatchStream(len(train), cfg.batch_size, rng)
    buffer = MatchBuffer(K, cfg.threshold, cfg.capacity)
    trace = TrainTrace()
    X, y = train.X, train.y

    frozen = None
    if cfg.strategy == "warmup_fixed":
        for _ in range(cfg.warm_steps):
            if batches.full:
                sub, _ = _step(sub, sub_opt, X, y)
            else:
                idx = batches.next()
                sub, _ = _step(sub, sub_opt, X[idx], y[idx])
        frozen = predict(sub, X)

    for step in range(1, cfg.steps + 1):
        idx = batches.next()
        sub_risk = float("nan")
        if frozen is not None:
            pred = frozen[idx]
        elif batches.full:
            sub, sub_risk = _step(sub, sub_opt, X, y)
            pred = predict(sub, X)[idx]
        else:
            sub, sub_risk = _step(sub, sub_opt, X[idx], y[idx])
            pred = predict(sub, X[idx])
        buffer.push(idx, pred, y[idx])

        main_risk = float("nan")
        batch = matched_subsample(buffer, rng)
        if batch is not None:
            main, main_risk = _step(main, main_opt, X[batch.index], y[batch.index])
            table = np.zeros((K, K), dtype=np.int64)
            np.add.at(table, (batch.pred, y[batch.index]), 1)
            trace.tables.append(table)
        trace.step.append(step)
        trace.sub_risk.append(sub_risk)
        trace.main_risk.append(main_risk)
        trace.emitted.append(batch is not None)

        if on_checkpoint and checkpoint_every and step % checkpoint_every == 0:
            on_checkpoint(step, main, sub)

    if not trace.n_emissions:
        log.warning("FMI emitted no matched batch in %d steps; main network is untrained", cfg.steps)
    return main, sub, trace
