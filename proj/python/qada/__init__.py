"""Python bindings for the QADA C++ core."""

from ._qada import (
    ConfigError,
    DataError,
    RunConfig,
    decode_span,
    dirichlet,
    evaluate_checkpoint,
    exact_match,
    f1,
    generate,
    mmd,
    normalize_answer,
    run,
)


def config(path=None, **overrides):
    """RunConfig from an optional key = value file plus keyword overrides."""
    cfg = RunConfig()
    if path is not None:
        cfg.apply_file(str(path))
    for key, value in overrides.items():
        cfg.set(key, str(value))
    cfg.validate()
    return cfg


__all__ = [
    "ConfigError",
    "DataError",
    "RunConfig",
    "config",
    "decode_span",
    "dirichlet",
    "evaluate_checkpoint",
    "exact_match",
    "f1",
    "generate",
    "mmd",
    "normalize_answer",
    "run",
]
