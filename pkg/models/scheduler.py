"""
Plateau learning-rate schedule driven by the epoch training loss.

An epoch counts as an improvement when its loss is at least ``min_delta``
below the best loss so far. After ``patience`` consecutive epochs without
improvement the rate is divided by ``factor`` and the counter restarts; the
best loss is kept.
"""

import logging
import math
from dataclasses import asdict, dataclass, replace

from utils.exceptions import NumericalError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PlateauSchedulerState:
    best_train_loss: float
    epochs_since_improvement: int
    current_lr: float
    reductions: int = 0

    @classmethod
    def initial(cls, lr0):
        return cls(best_train_loss=math.inf, epochs_since_improvement=0, current_lr=lr0)

    def to_dict(self):
        return asdict(self)


def plateau_step(state, epoch_train_loss, patience=30, min_delta=5e-3, factor=5.0, lr0=None):
    """Pure update of the schedule state for one finished epoch."""
    if not math.isfinite(epoch_train_loss):
        raise NumericalError(f"non-finite training loss {epoch_train_loss}; aborting")
    # a tiny slack keeps an improvement of exactly min_delta on the improving side
    if epoch_train_loss <= state.best_train_loss - min_delta + 1e-12 * max(1.0, abs(min_delta)):
        return replace(state, best_train_loss=epoch_train_loss, epochs_since_improvement=0)
    waited = state.epochs_since_improvement + 1
    if waited < patience:
        return replace(state, epochs_since_improvement=waited)
    reductions = state.reductions + 1
    lr = state.current_lr / factor if lr0 is None else lr0 / factor**reductions
    logger.info("Training loss plateaued for %d epochs; lr %.3g -> %.3g", patience, state.current_lr, lr)
    return replace(state, epochs_since_improvement=0, current_lr=lr, reductions=reductions)


class PlateauScheduler:
    """Applies :func:`plateau_step` to a torch optimizer."""

    def __init__(self, optimizer, lr0, patience=30, min_delta=5e-3, factor=5.0, state=None):
        self.optimizer = optimizer
        self.lr0 = lr0
        self.patience = patience
        self.min_delta = min_delta
        self.factor = factor
        self.state = state or PlateauSchedulerState.initial(lr0)
        self._apply()

    def _apply(self):
        for group in self.optimizer.param_groups:
            group["lr"] = self.state.current_lr

    def step(self, epoch_train_loss):
        self.state = plateau_step(
            self.state, epoch_train_loss, self.patience, self.min_delta, self.factor, self.lr0
        )
        self._apply()
        return self.state.current_lr

    def __repr__(self):
        return (
            f"PlateauScheduler(patience={self.patience}, min_delta={self.min_delta}, "
            f"factor={self.factor}, lr={self.state.current_lr:.3g})"
        )
