from .config import (
    EvalConfig, GenerationDefaults, RunConfig, ScheduleConfig, Stage2Config,
)
from .models import ModelBundle
from .generation import GenerationRequest, generate, generate_batch, image_grid
from .evaluation import EvalReport, eval_cs, eval_eca, evaluate_pipeline
from .training import (
    AdapterTrainState, OracleClassifier, adapter_step_tensors, build_pipeline,
    prepare_reference_encoders, run_stage1, run_stage2, train_adapter,
    train_adapter_step, train_oracle_classifier, warmup_text_backbone,
)
from .ablation import SUITES, ablation_run_config, run_ablation

__all__ = [
    "AdapterTrainState", "EvalConfig", "EvalReport", "GenerationDefaults",
    "GenerationRequest", "ModelBundle", "OracleClassifier", "RunConfig",
    "ScheduleConfig", "Stage2Config", "SUITES", "ablation_run_config",
    "adapter_step_tensors", "build_pipeline", "eval_cs", "eval_eca",
    "evaluate_pipeline", "generate", "generate_batch", "image_grid",
    "prepare_reference_encoders", "run_ablation", "run_stage1", "run_stage2",
    "train_adapter", "train_adapter_step", "train_oracle_classifier",
    "warmup_text_backbone",
]
