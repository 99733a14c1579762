from .config import RunConfig
from .scene import SyntheticScene, gen_scene
from .pipeline import Model, PipelineResult, run_pipeline
from .train import TrainingCurve, train_toy

__all__ = ["RunConfig", "SyntheticScene", "gen_scene", "Model", "PipelineResult", "run_pipeline",
           "TrainingCurve", "train_toy"]
