"""The harness configuration document.

One JSON object with the sections ``quad_params``, ``mpc``, ``sim`` and
``pipeline``. Missing sections or fields take their defaults; unknown
fields are rejected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from gpmpc.errors import InvalidInputError
from gpmpc.nmpc import MpcConfig
from gpmpc.pipeline import PipelineConfig
from gpmpc.quad_model import QuadParams
from gpmpc.sim import SimConfig

SECTIONS = ("quad_params", "mpc", "sim", "pipeline")


@dataclass
class Config:
    quad_params: QuadParams = field(default_factory=QuadParams)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    def to_dict(self) -> dict[str, Any]:
        return {name: getattr(self, name).to_dict() for name in SECTIONS}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Config:
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise InvalidInputError(f"unknown config sections: {sorted(unknown)}")
        return cls(
            quad_params=QuadParams.from_dict(d.get("quad_params", {})),
            mpc=MpcConfig.from_dict(d.get("mpc", {})),
            sim=SimConfig.from_dict(d.get("sim", {})),
            pipeline=PipelineConfig.from_dict(d.get("pipeline", {})),
        )

    @classmethod
    def load(cls, path: str | Path) -> Config:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise InvalidInputError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")
