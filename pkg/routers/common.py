#!/usr/bin/env python3
"""
Shared Command Plumbing
Result model, flag naming, seed and profile resolution used by every command.
"""

from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field, model_validator

from utils.config import config_manager
from utils.cost_model import load_profile
from utils.errors import ValidationError
from utils.moe_types import HardwareProfile


class CommandResult(BaseModel):
    """What a command produced; main prints the summary and writes manifests."""

    command: str
    outputs: List[str] = Field(default_factory=list)
    inputs: List[str] = Field(default_factory=list)
    seeds: Dict[str, Optional[int]] = Field(default_factory=dict)
    summary: Dict[str, Any] = Field(default_factory=dict)
    lines: List[str] = Field(default_factory=list)


def flag_name(field: str) -> str:
    return "--" + field.replace("_", "-")


def require_seed(seed: Optional[int], flag: str = "--seed") -> int:
    """Explicit seed, else MOE_SIM_SEED; never silent entropy."""
    resolved = config_manager.default_seed(seed)
    if resolved is None:
        raise ValidationError(f"{flag} is required (or set MOE_SIM_SEED)")
    if not 0 <= resolved < 2**64:
        raise ValidationError(f"{flag} must be a 64-bit unsigned integer, got {resolved}")
    return resolved


class ProfileFlags(BaseModel):
    """Hardware profile from a file or from inline constants."""

    profile: Optional[str] = None
    c_io: Optional[float] = None
    c_cpu: Optional[float] = None
    c_gpu: Optional[float] = None
    io_overlap: Optional[bool] = None

    @model_validator(mode="after")
    def _check_source(self):
        inline = [self.c_io, self.c_cpu, self.c_gpu]
        if self.profile is None and any(v is None for v in inline):
            raise ValueError("give --profile or all of --c-io, --c-cpu, --c-gpu")
        return self

    def resolve(self) -> HardwareProfile:
        if self.profile is not None:
            base = load_profile(self.profile)
            values = {
                "c_io": self.c_io if self.c_io is not None else base.c_io,
                "c_cpu": self.c_cpu if self.c_cpu is not None else base.c_cpu,
                "c_gpu": self.c_gpu if self.c_gpu is not None else base.c_gpu,
                "io_overlap": self.io_overlap if self.io_overlap is not None else base.io_overlap,
            }
            return HardwareProfile(**values)
        return HardwareProfile(
            c_io=self.c_io,
            c_cpu=self.c_cpu,
            c_gpu=self.c_gpu,
            io_overlap=bool(self.io_overlap),
        )

    def profile_inputs(self) -> List[str]:
        return [self.profile] if self.profile else []
