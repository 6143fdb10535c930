"""mcr: a desk-scale message-passing runtime with two checkpoint/restart
mechanisms, deterministic virtual-time benchmarks, and a fault injector.
"""

from .ckpt_multilevel import AppWorld, CkptLevel, GroupConfig, fti_init
from .ckpt_transparent import (
    BudgetParams,
    CheckpointCoordinator,
    CkptState,
    checkpoint_period,
    overhead,
    restore,
)
from .commbench import CommBenchConfig, run_comm_bench
from .config import DEFAULT_CONFIG, BootstrapKVS, JobSpec, parse_config
from .faults import FaultPlan
from .heatdis import HeatdisConfig, run_heatdis
from .runtime import Runtime, RuntimeOptions, TaskSpec
from .sched import CostModel

__version__ = "0.1.0"

__all__ = [
    "AppWorld", "BootstrapKVS", "BudgetParams", "CheckpointCoordinator",
    "CkptLevel", "CkptState", "CommBenchConfig", "CostModel",
    "DEFAULT_CONFIG", "FaultPlan", "GroupConfig", "HeatdisConfig", "JobSpec",
    "Runtime", "RuntimeOptions", "TaskSpec", "checkpoint_period", "fti_init",
    "overhead", "parse_config", "restore", "run_comm_bench", "run_heatdis",
]
