"""Python access to the mmfm precoding library and its pipeline stages."""

import json as _json

from ._core import (
    ConfigError,
    FormatError,
    InvalidArgument,
    NumericalError,
    PrecodingSolution,
    PrerequisiteError,
    RunConfig,
    SingularMatrixError,
    SystemConfig,
    build_version,
    energy,
    flop_count,
    load_config,
    parse_config,
    read_dataset,
    sum_rate,
    user_rates,
    wmmse_precoder,
    zf_precoder,
)
from ._core import Pipeline as _Pipeline

STAGES = ("gen_data", "pretrain", "train", "adapt", "eval", "sweep")


class Pipeline:
    """Stage runner; each stage returns a dict with decoded metrics."""

    def __init__(self, config, log=None):
        self._impl = _Pipeline(config, log)

    def __getattr__(self, name):
        if name not in STAGES and name != "flops":
            raise AttributeError(name)
        stage = getattr(self._impl, name)

        def run(*args, **kwargs):
            result = stage(*args, **kwargs)
            result["metrics"] = _json.loads(result.pop("metrics_json"))
            return result

        return run

    def run_all(self):
        return [getattr(self, s)() for s in STAGES]

    def eval_report_name(self):
        return self._impl.eval_report_name()


__all__ = [name for name in dir() if not name.startswith("_")]
