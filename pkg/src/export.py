"""
Export module for writing and reading run artifacts.
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from src.analysis import LimitReport
from src.clusters import MCPartition
from src.control import ControlSequence, Outcome
from src.engine import AgentPair, ModelParams, OpinionState, Trace
from src.errors import ArtifactIOError, ParameterError, VerificationError
from src.experiments import SweepResult
from src.utils.helpers import ensure_directory_exists, file_sha256

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


def params_to_dict(params: ModelParams) -> Dict[str, Any]:
    return {"n": params.n, "mu": params.mu, "bounds": list(params.bounds)}


def params_from_dict(data: Dict[str, Any]) -> ModelParams:
    params = ModelParams.build(data["mu"], data["bounds"])
    if params.n != data.get("n", params.n):
        raise ParameterError(f"params list n={data['n']} but {params.n} bounds")
    return params


class ArtifactWriter:
    """
    Class for writing artifacts into one output directory and keeping their manifest.
    """
    def __init__(self, output_dir: Path):
        """
        Initialize the writer.

        Args:
            output_dir: Directory receiving every artifact and the manifest
        """
        self.output_dir = Path(output_dir)
        self.artifacts: List[Dict[str, str]] = []
        try:
            ensure_directory_exists(self.output_dir)
        except OSError as e:
            raise ArtifactIOError(f"cannot create output directory {self.output_dir}: {e}") from e

    def _path(self, filename: str) -> Path:
        return self.output_dir / filename

    def _record(self, path: Path, kind: str) -> Path:
        self.artifacts.append({"file": path.name, "kind": kind, "sha256": file_sha256(path)})
        logger.info("Wrote %s artifact %s", kind, path)
        return path

    def _write_json(self, data: Dict[str, Any], filename: str, kind: str) -> Path:
        path = self._path(filename)
        try:
            with open(path, "w") as f:
                json.dump(data, f, indent=2, default=str)
        except OSError as e:
            raise ArtifactIOError(f"cannot write {path}: {e}") from e
        return self._record(path, kind)

    def _write_csv(self, frame: pd.DataFrame, filename: str, kind: str) -> Path:
        path = self._path(filename)
        try:
            frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
        except OSError as e:
            raise ArtifactIOError(f"cannot write {path}: {e}") from e
        return self._record(path, kind)

    def write_trace(self, trace: Trace, stem: str = "trace") -> Tuple[Path, Path]:
        """
        Write a trace as a CSV of recorded states plus a JSON sidecar.

        The CSV has columns t, x_1..x_n with shortest round-trip floats; the
        sidecar holds parameters, seed, thinning and the full pair log.

        Returns:
            Tuple[Path, Path]: CSV path and sidecar path
        """
        n = trace.params.n
        frame = pd.DataFrame(
            [state.x for state in trace.states],
            columns=[f"x_{a}" for a in range(1, n + 1)],
        )
        frame.insert(0, "t", [state.t for state in trace.states])
        csv_path = self._write_csv(frame, f"{stem}.csv", "trace")
        meta = {
            "params": params_to_dict(trace.params),
            "seed": trace.seed,
            "thinning": trace.thinning,
            "steps": trace.steps,
            "states_file": csv_path.name,
            "pairs": trace.pairs.tolist(),
        }
        meta_path = self._write_json(meta, f"{stem}.json", "trace-metadata")
        return csv_path, meta_path

    def write_partition(self, partition: MCPartition, stem: str = "partition") -> Path:
        data = {
            "state_time": partition.state_time,
            "clusters": [
                {
                    "members": list(cluster.members),
                    "anchor": cluster.anchor,
                    "r_max": cluster.r_max,
                    "r_min": cluster.r_min,
                    "x_min": cluster.x_min,
                    "x_max": cluster.x_max,
                    "complete": cluster.complete,
                }
                for cluster in partition.clusters
            ],
        }
        return self._write_json(data, f"{stem}.json", "partition")

    def write_sequence(self, seq: ControlSequence, params: ModelParams, stem: str = "sequence") -> Path:
        data = {
            "params": params_to_dict(params),
            "start_state": list(seq.start_state.x),
            "pairs": [pair.as_list() for pair in seq.pairs],
            "claimed_outcome": seq.claimed_outcome.value,
            "length_bound": seq.length_bound,
            "target_members": list(seq.target_members),
            "segments": [
                {
                    "phase": step.phase.value,
                    "active_agent": step.active_agent,
                    "target_set": list(step.target_set),
                    "partner": step.partner,
                    "repeat_count": step.repeat_count,
                }
                for step in seq.segments
            ],
        }
        return self._write_json(data, f"{stem}.json", "control-sequence")

    def write_limit_report(self, report: LimitReport, stem: str = "limit") -> Path:
        data = {
            "status": report.status,
            "tau": report.tau,
            "x_star": list(report.x_star) if report.x_star is not None else None,
            "structure_ok": report.structure_ok,
            "consensus": report.consensus,
            "tolerance": report.tolerance,
        }
        return self._write_json(data, f"{stem}.json", "limit-report")

    def write_sweep(self, result: SweepResult, stem: str = "sweep") -> Path:
        return self._write_csv(result.to_frame(), f"{stem}.csv", "sweep")

    def write_table(self, frame: pd.DataFrame, stem: str, kind: str = "table") -> Path:
        return self._write_csv(frame, f"{stem}.csv", kind)

    def write_manifest(self, config: Dict[str, Any], command: str) -> Path:
        """
        Write manifest.json listing the run configuration and every artifact with its hash.
        """
        path = self._path("manifest.json")
        data = {"command": command, "config": config, "artifacts": self.artifacts}
        try:
            with open(path, "w") as f:
                json.dump(data, f, indent=2, default=str)
        except OSError as e:
            raise ArtifactIOError(f"cannot write {path}: {e}") from e
        return path


def _read_json(path: Path) -> Dict[str, Any]:
    try:
        with open(path) as f:
            return json.load(f)
    except OSError as e:
        raise ArtifactIOError(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ArtifactIOError(f"{path} is not valid JSON: {e}") from e


def load_trace(csv_path: Path, meta_path: Optional[Path] = None) -> Trace:
    """
    Load a trace written by ArtifactWriter.write_trace.

    Args:
        csv_path: Path to the state CSV
        meta_path: Path to the JSON sidecar (defaults to the CSV path with .json)

    Returns:
        Trace: The reconstructed trace
    """
    csv_path = Path(csv_path)
    meta_path = Path(meta_path) if meta_path is not None else csv_path.with_suffix(".json")
    meta = _read_json(meta_path)
    try:
        frame = pd.read_csv(csv_path, float_precision="round_trip")
    except OSError as e:
        raise ArtifactIOError(f"cannot read {csv_path}: {e}") from e
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ArtifactIOError(f"{csv_path} is not a trace CSV: {e}") from e

    try:
        params = params_from_dict(meta["params"])
        columns = [f"x_{a}" for a in range(1, params.n + 1)]
        states = tuple(
            OpinionState(int(t), tuple(row))
            for t, row in zip(frame["t"].tolist(), frame[columns].itertuples(index=False, name=None))
        )
        pairs = np.array(meta["pairs"], dtype=np.int32).reshape(-1, 2)
        thinning = int(meta["thinning"])
        seed = int(meta["seed"])
    except KeyError as e:
        raise ArtifactIOError(f"trace artifact is missing field {e}") from e
    pairs.setflags(write=False)
    return Trace(params=params, seed=seed, states=states, pairs=pairs, thinning=thinning)


def load_sequence(path: Path) -> Tuple[ControlSequence, ModelParams]:
    """
    Load a control sequence and its parameters.

    Content that cannot form a valid sequence (a bad pair, an opinion outside
    [0, 1], an unknown outcome) is reported as a verification failure.
    """
    data = _read_json(Path(path))
    try:
        params = params_from_dict(data["params"])
        raw_pairs = data["pairs"]
        raw_start = data["start_state"]
        raw_outcome = data["claimed_outcome"]
        length_bound = int(data["length_bound"])
        members = tuple(int(a) for a in data["target_members"])
    except KeyError as e:
        raise ArtifactIOError(f"sequence artifact is missing field {e}") from e

    try:
        start = OpinionState.of(raw_start)
        start.require_size(params.n)
        pairs = tuple(AgentPair(int(i), int(j)) for i, j in raw_pairs)
        outcome = Outcome(raw_outcome)
    except (ParameterError, ValueError, TypeError) as e:
        raise VerificationError(f"sequence content is invalid: {e}") from e
    seq = ControlSequence(
        pairs=pairs,
        start_state=start,
        claimed_outcome=outcome,
        length_bound=length_bound,
        target_members=members,
    )
    return seq, params
