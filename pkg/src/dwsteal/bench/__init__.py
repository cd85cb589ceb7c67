from .cholesky import CholeskyConfig, build_cholesky
from .synthetic import BagConfig, build_bag
from .uts import UtsConfig, build_uts


def build_program(spec: dict):
    """Build a program from a JSON-able description such as
    ``{"benchmark": "cholesky", "T": 8, "tile": 16}``."""
    spec = dict(spec)
    name = spec.pop("benchmark")
    if name == "cholesky":
        return build_cholesky(CholeskyConfig(**spec))
    if name == "uts":
        preset = spec.pop("preset", None)
        cfg = UtsConfig.preset(preset, **spec) if preset else UtsConfig(**spec)
        return build_uts(cfg)
    if name == "bag":
        return build_bag(BagConfig(**spec))
    raise ValueError(f"unknown benchmark {name!r}")


__all__ = ["build_program", "CholeskyConfig", "UtsConfig", "BagConfig",
           "build_cholesky", "build_uts", "build_bag"]
