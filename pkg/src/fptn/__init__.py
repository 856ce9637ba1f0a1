"""Sensor-token transformer forecasting for multi-sensor traffic series.

The input sequence is formed along the sensor dimension: one token per
sensor, each token a projection of that sensor's recent history, so the
token width never grows with the sensor count. A batch-normalized
Transformer encoder mixes the tokens and an affine head emits the joint
K-step forecast, trained end to end with MAE loss on a taped float64
autodiff core that is verified against central finite differences.
"""

import os as _os

# Pin numeric backends to one thread before numpy loads anywhere, so a
# deterministic run stays deterministic regardless of BLAS threading.
if _os.environ.get("FPTN_DETERMINISTIC") == "1":
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, "1")

from . import autodiff, checkpoint, data, errors, model, reference, synthetic, training
from .autodiff import (BatchNormState, FiniteDiffReport, Tape, Tensor, backward,
                       batch_norm, finite_diff_check, gelu, matmul, softmax)
from .data import (NormStats, RawSeries, SampleSet, apply_zscore, fit_zscore,
                   invert_zscore, iterate_batches, load_raw, make_windows,
                   prepare_dataset, split_samples)
from .model import (ModelConfig, ModelParams, expected_parameter_count, forward,
                    gradient_check_model, mae_loss)
from .synthetic import SyntheticSpec, baseline_historical_average, baseline_last_value, generate
from .training import (EarlyStopState, MetricsReport, RAdamState, TrainConfig,
                       early_stop_update, evaluate_metrics, evaluate_split,
                       grid_search, radam_step, run_embedding_ablation, train)

__version__ = "0.1.0"
