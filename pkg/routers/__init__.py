# Command handlers for the expert placement simulator.
# Each command pairs a pydantic request model with a handler returning a CommandResult.

from typing import Any, Callable, Dict, Tuple, Type

from pydantic import BaseModel

from routers.common import CommandResult
from routers.optimizer import FitProfileRequest, OptimizeTauRequest, fit, optimize
from routers.replay import ReplayRequest, replay
from routers.simulation import CompareRequest, SimulateRequest, compare_policies, simulate
from routers.traces import AnalyzeRequest, GenTraceRequest, analyze, gen_trace
from utils.config import get_config_summary
from utils.run_manifest import RunManifest, write_manifest

COMMANDS: Dict[str, Tuple[Type[BaseModel], Callable[[Any], CommandResult]]] = {
    "gen-trace": (GenTraceRequest, gen_trace),
    "analyze": (AnalyzeRequest, analyze),
    "optimize-tau": (OptimizeTauRequest, optimize),
    "simulate": (SimulateRequest, simulate),
    "compare": (CompareRequest, compare_policies),
    "fit-profile": (FitProfileRequest, fit),
    "replay": (ReplayRequest, replay),
}


def run_command(command: str, payload: Dict[str, Any]) -> CommandResult:
    """Validate the payload, run the handler and write a manifest beside each output."""
    model, handler = COMMANDS[command]
    request = model.model_validate(payload)
    result = handler(request)
    if result.outputs:
        config = request.model_dump(mode="json")
        if "seed" in config and result.seeds.get("seed") is not None:
            config["seed"] = result.seeds["seed"]
        manifest = RunManifest.for_inputs(
            command,
            config,
            inputs=result.inputs,
            seeds=result.seeds,
            environment=get_config_summary(),
        )
        write_manifest(manifest, result.outputs)
    return result


__all__ = ["COMMANDS", "CommandResult", "run_command"]
