"""EEG match/mismatch models, synthetic data and statistics."""

import json as _json

from ._core import (
    ConfigError,
    FitError,
    Model,
    TrainingError,
    dilation_schedule,
    fit_psychometric,
    generate_envelope,
    pearson_with_p,
    psychometric,
    receptive_field,
    snr_grid,
    wilcoxon_signed_rank,
)
from ._core import run_command as _run_command


def run(command, config):
    """Run a batch command (synth, train, eval, ...) with a configuration dict."""
    _run_command(command, _json.dumps(config))


def build_model(spec, seed=0):
    """Build a freshly initialized model from a spec dict such as {"type": "dilated"}."""
    return Model.build(_json.dumps(spec), seed)


__all__ = [
    "ConfigError",
    "FitError",
    "Model",
    "TrainingError",
    "build_model",
    "dilation_schedule",
    "fit_psychometric",
    "generate_envelope",
    "pearson_with_p",
    "psychometric",
    "receptive_field",
    "run",
    "snr_grid",
    "wilcoxon_signed_rank",
]
