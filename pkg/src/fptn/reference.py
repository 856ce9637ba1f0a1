"""Published full-scale benchmark constants, kept for annotation only.

These numbers come from the original full-PeMS evaluation of this
architecture. The desk-scale test suite never targets them; they surface in
sweep/ablation CSV annotations and in the optional ``--full`` comparison
when a user supplies the real datasets.
"""

# sensors, total 5-minute steps
DATASET_SUMMARIES = {
    "PeMSD3": {"sensors": 358, "steps": 26208},
    "PeMSD4": {"sensors": 307, "steps": 16992},
    "PeMSD7": {"sensors": 883, "steps": 28224},
    "PeMSD8": {"sensors": 170, "steps": 17856},
}

# best reported forecasting error per dataset (MAPE in percent)
FULL_SCALE_RESULTS = {
    "PeMSD3": {"mae": 14.62, "rmse": 24.81, "mape": 14.61},
    "PeMSD4": {"mae": 18.49, "rmse": 30.29, "mape": 13.10},
    "PeMSD7": {"mae": 19.94, "rmse": 32.49, "mape": 8.77},
    "PeMSD8": {"mae": 13.98, "rmse": 23.30, "mape": 10.06},
}

# hyperparameters that performed best at full scale (PeMSD3 validation)
BEST_HYPERPARAMETERS = {"d_model": 256, "n_layers": 4, "n_heads": 8}

# full-scale PeMSD4 results per (time embedding on?, positional mode)
EMBEDDING_ABLATION_PEMSD4 = {
    (False, "none"):      {"mae": 22.59, "rmse": 35.48, "mape": 16.92},
    (True, "none"):       {"mae": 21.65, "rmse": 34.80, "mape": 15.21},
    (False, "fixed"):     {"mae": 22.14, "rmse": 34.54, "mape": 18.48},
    (False, "learnable"): {"mae": 19.38, "rmse": 30.97, "mape": 15.95},
    (True, "fixed"):      {"mae": 18.55, "rmse": 30.32, "mape": 14.16},
    (True, "learnable"):  {"mae": 18.49, "rmse": 30.29, "mape": 13.10},
}
