from src.scaler.agent import (
    ExperiencePool,
    QTable,
    RLState,
    Transition,
    latency_bucket,
    offline_train,
    q_learning_update,
    sarsa_update,
    select_action,
)
from src.scaler.baselines import HybridAutoscaler, baseline_hybrid, baseline_threshold
from src.scaler.control_loop import (
    Agent,
    ControlLoopResult,
    LoopMode,
    prepare_workload,
    run_baseline_loop,
    run_control_loop,
)
from src.scaler.rewards import reward_rt, reward_total, reward_util

__all__ = [
    "Agent",
    "ControlLoopResult",
    "ExperiencePool",
    "HybridAutoscaler",
    "LoopMode",
    "QTable",
    "RLState",
    "Transition",
    "baseline_hybrid",
    "baseline_threshold",
    "latency_bucket",
    "offline_train",
    "prepare_workload",
    "q_learning_update",
    "reward_rt",
    "reward_total",
    "reward_util",
    "run_baseline_loop",
    "run_control_loop",
    "sarsa_update",
    "select_action",
]
