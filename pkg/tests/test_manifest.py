"""Run manifests: digests, sidecar naming, JSON round trips."""

import hashlib
import json

import pytest

from doprec.manifest import (RunManifest, load_manifest, manifest_path,
                             sha256_file, write_manifest)


def test_sha256_file_matches_hashlib(tmp_path):
    path = tmp_path / "blob.bin"
    payload = bytes(range(256)) * 17
    path.write_bytes(payload)
    assert sha256_file(path) == hashlib.sha256(payload).hexdigest()


def test_sidecar_naming():
    assert manifest_path("out/data.dprc") == "out/data.dprc.manifest.json"


def test_round_trip_preserves_fields(tmp_path):
    manifest = RunManifest(command=["generate", "--count", "4"],
                           config="[laser]\nP = 1e-13\n",
                           config_digest="ab" * 32,
                           seeds={"seed": 7}, started="2026-01-01T00:00:00",
                           finished="2026-01-01T00:00:05")
    out = tmp_path / "data.dprc"
    out.write_bytes(b"payload")
    manifest.record_output(out)
    sidecar = write_manifest(manifest, out)
    assert sidecar == manifest_path(out)
    loaded = load_manifest(sidecar)
    assert loaded == manifest


def test_output_digests_are_recomputable(tmp_path):
    out = tmp_path / "a.csv"
    out.write_text("rank,sigma\n1,2.0\n")
    manifest = RunManifest(command=["svd"])
    manifest.record_output(out)
    assert manifest.outputs[str(out)] == sha256_file(out)
    out.write_text("rank,sigma\n1,3.0\n")
    assert manifest.outputs[str(out)] != sha256_file(out)


def test_json_rendering_is_deterministic(tmp_path):
    manifest = RunManifest(command=["x"], seeds={"b": 2, "a": 1})
    again = RunManifest(command=["x"], seeds={"a": 1, "b": 2})
    assert manifest.to_json() == again.to_json()
    assert manifest.to_json().endswith("\n")


@pytest.mark.parametrize("payload", [
    "{not json",
    json.dumps({"command": ["x"], "bogus": 1}),
    json.dumps({"version": "0.1.0"}),
    json.dumps({"command": "generate"}),
])
def test_malformed_manifests_are_rejected(tmp_path, payload):
    path = tmp_path / "m.json"
    path.write_text(payload)
    with pytest.raises(ValueError):
        load_manifest(path)
