"""Bundled example problems and the LQ instance generator."""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

from ..ocp import OcProblem, load_problem

EXAMPLES = ("train", "bang_bang", "u_squared", "u_cubed", "overactuated", "toy_tilde_c")


def example_path(name: str) -> Path:
    path = Path(str(resources.files(__name__).joinpath(f"{name}.json")))
    if not path.is_file():
        raise FileNotFoundError(f"no bundled problem named {name!r}")
    return path


def load_example(name: str) -> OcProblem:
    return load_problem(example_path(name))


def available() -> list[str]:
    root = Path(str(resources.files(__name__)))
    return sorted(p.stem for p in root.glob("*.json") if p.stem != "lq_config")


def lq_from_config(config) -> list[OcProblem]:
    """Instances described by an ``lq_config`` document (dict or path)."""
    from ..pontryagin import random_lq

    if not isinstance(config, dict):
        config = json.loads(Path(config).read_text(encoding="utf-8"))
    return [
        random_lq(int(config["n"]), int(config["m"]), int(seed), bool(config.get("singular", False)))
        for seed in config["seeds"]
    ]
