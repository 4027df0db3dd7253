from .models import Model, ModelConfig, build_model
from .tasks import SyntheticTask
from .train import (BenchComparison, TrainReport, bench_inference, compare_fused, evaluate,
                    model_gradcheck, sweep, sweep_to_csv, train)

__all__ = [
    "Model", "ModelConfig", "build_model", "SyntheticTask", "BenchComparison", "TrainReport",
    "bench_inference", "compare_fused", "evaluate", "model_gradcheck", "sweep", "sweep_to_csv",
    "train",
]
