"""Multitask evolutionary pruning of one pretrained network into a set of
task-specialised sub-networks."""

from .network import Architecture, ReferenceNet, TrainHyper
from .genome import GroupedMask, GroupingMap, build_grouping
from .taskbed import SuiteSpec, Task, generate_suite
from .evolver import EngineConfig, run
from .specialists import SetOfSets, assemble

__version__ = "0.1.0"
