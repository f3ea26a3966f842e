"""Hierarchical federated learning with filter-aligned, Gram-weighted model merging."""

from .model import ModelSpec, ModelWeights, reduced_lenet
from .orchestrator import DataConfig, RunConfig, Topology, build_federation, evaluate, run

__all__ = ["ModelSpec", "ModelWeights", "reduced_lenet", "DataConfig", "RunConfig", "Topology",
           "build_federation", "evaluate", "run"]
__version__ = "0.1.0"
