"""
Tests for artifact writing, manifests and artifact loading.
"""
import json

import numpy as np
import pandas as pd
import pytest

from src.analysis import detect_limit
from src.clusters import mc_partition
from src.control import Outcome, split_or_shrink, verify_outcome
from src.engine import OpinionState, make_rng, simulate, verify_replay
from src.errors import ArtifactIOError, VerificationError
from src.export import ArtifactWriter, load_sequence, load_trace, params_from_dict, params_to_dict
from src.utils.helpers import file_sha256


@pytest.fixture
def writer(tmp_path):
    return ArtifactWriter(tmp_path / "run")


class TestTraceArtifacts:
    def test_trace_round_trip(self, writer, eight_agent_params):
        x0 = OpinionState.of(make_rng(21).random(8).tolist())
        trace = simulate(x0, eight_agent_params, 2_000, seed=21, thinning=25)
        csv_path, meta_path = writer.write_trace(trace)

        loaded = load_trace(csv_path)
        assert [s.t for s in loaded.states] == [s.t for s in trace.states]
        assert [tuple(s.x) for s in loaded.states] == [s.x for s in trace.states]
        assert np.array_equal(loaded.pairs, trace.pairs)
        assert loaded.seed == 21
        assert loaded.thinning == 25
        assert verify_replay(loaded)

    def test_csv_layout(self, writer, reference_params):
        trace = simulate(OpinionState.of((0.1, 0.2, 0.3)), reference_params, 0, seed=0)
        csv_path, _ = writer.write_trace(trace)
        frame = pd.read_csv(csv_path)
        assert list(frame.columns) == ["t", "x_1", "x_2", "x_3"]
        assert len(frame) == 1

    def test_missing_trace_file(self, tmp_path):
        with pytest.raises(ArtifactIOError):
            load_trace(tmp_path / "absent.csv")

    def test_sidecar_missing_field(self, writer, reference_params):
        trace = simulate(OpinionState.of((0.1, 0.2, 0.3)), reference_params, 5, seed=0)
        csv_path, meta_path = writer.write_trace(trace)
        meta = json.loads(meta_path.read_text())
        del meta["pairs"]
        meta_path.write_text(json.dumps(meta))
        with pytest.raises(ArtifactIOError):
            load_trace(csv_path)


class TestManifest:
    def test_records_every_artifact_with_hash(self, writer, reference_params):
        trace = simulate(OpinionState.of((0.0, 0.45, 0.9)), reference_params, 100, seed=4)
        writer.write_trace(trace)
        writer.write_partition(mc_partition(trace.final_state, reference_params.confidence))
        writer.write_limit_report(detect_limit(trace))
        manifest_path = writer.write_manifest({"seed": 4}, "simulate")

        manifest = json.loads(manifest_path.read_text())
        assert manifest["command"] == "simulate"
        assert manifest["config"] == {"seed": 4}
        kinds = [entry["kind"] for entry in manifest["artifacts"]]
        assert kinds == ["trace", "trace-metadata", "partition", "limit-report"]
        for entry in manifest["artifacts"]:
            assert entry["sha256"] == file_sha256(writer.output_dir / entry["file"])

    def test_unwritable_directory(self, tmp_path):
        blocker = tmp_path / "blocker"
        blocker.write_text("not a directory")
        with pytest.raises(ArtifactIOError):
            ArtifactWriter(blocker / "run")


class TestSequenceArtifacts:
    def _written_sequence(self, writer, chain_params, chain_state):
        cluster = mc_partition(chain_state, chain_params.confidence).clusters[0]
        seq = split_or_shrink(chain_state, cluster, chain_params)
        return seq, writer.write_sequence(seq, chain_params)

    def test_sequence_round_trip(self, writer, chain_params, chain_state):
        seq, path = self._written_sequence(writer, chain_params, chain_state)
        loaded, params = load_sequence(path)
        assert params.bounds == chain_params.bounds
        assert loaded.pairs == seq.pairs
        assert loaded.claimed_outcome is seq.claimed_outcome
        assert loaded.target_members == (1, 2, 3)
        assert verify_outcome(loaded, params)

    def test_tampered_start_state(self, writer, chain_params, chain_state):
        _, path = self._written_sequence(writer, chain_params, chain_state)
        data = json.loads(path.read_text())
        data["start_state"][1] = 1.5
        path.write_text(json.dumps(data))
        with pytest.raises(VerificationError):
            load_sequence(path)

    def test_unknown_outcome(self, writer, chain_params, chain_state):
        _, path = self._written_sequence(writer, chain_params, chain_state)
        data = json.loads(path.read_text())
        data["claimed_outcome"] = "merge"
        path.write_text(json.dumps(data))
        with pytest.raises(VerificationError):
            load_sequence(path)

    def test_missing_field(self, writer, chain_params, chain_state):
        _, path = self._written_sequence(writer, chain_params, chain_state)
        data = json.loads(path.read_text())
        del data["length_bound"]
        path.write_text(json.dumps(data))
        with pytest.raises(ArtifactIOError):
            load_sequence(path)

    def test_not_json(self, tmp_path):
        path = tmp_path / "sequence.json"
        path.write_text("{not json")
        with pytest.raises(ArtifactIOError):
            load_sequence(path)


def test_params_dict_round_trip(chain_params):
    data = params_to_dict(chain_params)
    assert data == {"n": 3, "mu": 0.5, "bounds": [0.4, 0.3, 0.2]}
    assert params_from_dict(data) == chain_params
    assert Outcome("split") is Outcome.SPLIT
