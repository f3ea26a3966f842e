"""Shared experiment runs for the acceptance suite (computed once per session)."""

import functools
import math
import time

import numpy as np

from hfedatm import orchestrator as orch
from hfedatm.client import DpBudget

SEEDS = (0, 1, 2, 3, 4)
LAMBDAS = (1.0, 0.0)
EPSILONS = (math.inf, 4.0, 1.0, 0.1)
DP_LAMBDA = 1.0

_cache = {}


@functools.lru_cache(maxsize=None)
def federation(lam, seed):
    return orch.build_federation(orch.DataConfig(lam=lam), orch.Topology(), seed)


def run(lam, seed, mode, epsilon=math.inf):
    key = (lam, seed, mode, epsilon)
    if key not in _cache:
        dp = None if math.isinf(epsilon) else DpBudget(epsilon, 1e-5, 1.0)
        cfg = orch.RunConfig(mode=mode, seed=seed, dp=dp)
        start = time.perf_counter()
        result = orch.run(cfg, orch.Topology(), federation(lam, seed))
        _cache[key] = (result.records, time.perf_counter() - start)
    return _cache[key]


def final_acc(lam, seed, mode, epsilon=math.inf):
    return run(lam, seed, mode, epsilon)[0][-1].target_acc


def all_runs():
    return dict(_cache)
