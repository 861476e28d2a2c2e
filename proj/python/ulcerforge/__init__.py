"""DDPM workbench for diabetic-foot-ulcer images."""

import json as _json

from . import _core
from ._core import (
    ConfigError,
    ConflictError,
    DimensionError,
    Error,
    IndexError,
    IoError,
    NotFoundError,
    NumericError,
    ParseError,
    UsageError,
    Schedule,
    Denoiser,
    build_linear_schedule,
    forward_diffuse,
    make_blob_dataset,
    fid,
    mmd2_unbiased,
    kid,
    t_test_summary,
    t_test_samples,
    pearson_r,
    gradcheck_ops,
    run_command,
    __version__,
)


def init_denoiser(config=None, seed=0):
    return _core.init_denoiser(_json.dumps(config or {}), seed)


def fit(dataset, model=None, train=None, schedule=None):
    """Trains in memory and returns (denoiser, losses)."""
    schedule = schedule or build_linear_schedule()
    return _core.fit(dataset, _json.dumps(model or {}), _json.dumps(train or {}), schedule)


def sample(denoiser, schedule, n, seed=0):
    return _core.sample(denoiser, schedule, n, seed)


def fixture_report():
    return _json.loads(_core.fixture_report())


def gradcheck_denoiser(config=None, seed=0):
    return _core.gradcheck_denoiser(_json.dumps(config or {}), seed)
