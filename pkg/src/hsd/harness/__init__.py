from .config import ConfigError, TrainConfig, load_config
from .pipeline import EvalReport, PipelineError, compare_modes, evaluate, run_pipeline, sweep_quantization

__all__ = ["ConfigError", "EvalReport", "PipelineError", "TrainConfig", "compare_modes",
           "evaluate", "load_config", "run_pipeline", "sweep_quantization"]
