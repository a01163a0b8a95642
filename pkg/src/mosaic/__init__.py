"""Memory planning toolkit for diffusion-LM inference.

Models per-step transient-activation memory, plans a globally reused
contiguous workspace via liveness analysis and first-fit placement, adaptively
chunks peak operators with a bottleneck-driven search, and quantifies
fragmentation against caching-allocator baselines.
"""

from .chunker import ChunkConfig, PeakReport, SearchOutcome, evaluate_peak, search_bottleneck, search_bruteforce
from .dims import Dim, ceildiv, const, parse_dim, sym
from .errors import (
    AnalysisError,
    BuildError,
    CapacityError,
    ExecutionFault,
    InfeasibleRunError,
    InputError,
    InstantiationError,
    MosaicError,
    ParseError,
    ResourceError,
    TooLarge,
    UsageError,
    ValidationError,
)
from .graph import ConcreteGraph, GraphTemplate, load_template, new_template, template_from_json_dict
from .kernel import GatherGemmProblem, ScratchAccount, gather_gemm, gemm_reference
from .liveness import LifetimeTable, StorageGroup, analyze, max_live
from .planner import MemoryPlan, PlanStats, plan_exact, plan_first_fit, validate
from .vmm import ExecutionReport, Workspace, commit_to, execute_plan, reserve
from .workload import (
    ModelConfig,
    MoEConfig,
    ScenarioConfig,
    build_layer_template,
    find_lmax,
    load_model_config,
    par_curve,
    simulate_run,
    toy_configs,
)

__version__ = "0.1.0"
