"""Distributed MAML: several projected local steps per selected user, then server averaging."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import LossModel
from .meta_objective import Estimate, MetaConfig, population_meta_loss
from .task_model import TaskCollection, rng_stream
from .trainer import ConfigurationError, TrainerConfig, TrainerOutput, _train


@dataclass(frozen=True)
class FedConfig(TrainerConfig):
    """``TrainerConfig`` plus ``tau`` local steps; ``t_max`` counts outer rounds."""

    tau: int = 1
    verbose_trace: bool = False

    def __post_init__(self):
        super().__post_init__()
        if self.tau < 1:
            raise ConfigurationError("tau must be >= 1")


def fed_train(collection: TaskCollection, cfg: FedConfig, loss: LossModel) -> TrainerOutput:
    """Each round, ``r`` users run ``tau`` projected steps from the server model; the server averages.

    The stepsize is fixed within a round. The average of feasible local
    iterates is feasible, so the server does not project.
    """
    return _train(collection, cfg, loss, tau=cfg.tau, local_project=True, server_project=False,
                  trace_local=cfg.verbose_trace)


@dataclass
class PersonalizationReport:
    per_user: list[Estimate]
    unadapted: list[Estimate]

    @property
    def average(self) -> float:
        return float(np.mean([e.value for e in self.per_user]))

    @property
    def average_unadapted(self) -> float:
        return float(np.mean([e.value for e in self.unadapted]))

    @property
    def average_se(self) -> float:
        return float(np.sqrt(sum(e.se**2 for e in self.per_user)) / len(self.per_user))


def fed_personalization_eval(output: TrainerOutput, collection: TaskCollection, cfg: TrainerConfig,
                             loss: LossModel, samples: int = 20_000, seed: int | None = None) -> PersonalizationReport:
    """Post-adaptation population loss of the meta-model on each user's task.

    The unadapted (``alpha = 0``) loss is evaluated on the same draws for comparison.
    """
    seed = cfg.seed if seed is None else seed
    w = output.averaged_iterate
    adapted = MetaConfig(alpha=cfg.alpha, k=cfg.k, mc_population=samples)
    plain = MetaConfig(alpha=0.0, k=cfg.k, mc_population=samples)
    per_user, unadapted = [], []
    for i, spec in enumerate(collection.specs):
        per_user.append(population_meta_loss(w, spec, adapted, loss, rng_stream(seed, "personal", i)))
        unadapted.append(population_meta_loss(w, spec, plain, loss, rng_stream(seed, "personal", i)))
    return PersonalizationReport(per_user, unadapted)
