from src.experiment.runner import ExperimentResult, compare, run_experiment, summarize, sweep

__all__ = ["ExperimentResult", "compare", "run_experiment", "summarize", "sweep"]
