"""Run manifests: a JSON sidecar recording how each artifact was made.

Every command that writes a file also writes `<file>.manifest.json` next to
its primary output.  The manifest holds the exact argument vector, the tool
version, the resolved configuration (text and SHA-256 digest), all seeds,
wall-clock timestamps, and a SHA-256 digest of every output file.  Replaying
the recorded command with a single worker must reproduce every output
byte for byte; the digests make the comparison a one-liner.
"""

from __future__ import annotations

import dataclasses
import datetime
import hashlib
import json

from . import __version__

__all__ = ["RunManifest", "sha256_file", "manifest_path",
           "write_manifest", "load_manifest"]


def utc_now() -> str:
    """Current UTC time, ISO-8601 with microseconds."""
    return datetime.datetime.now(datetime.timezone.utc).isoformat(
        timespec="microseconds")


def sha256_file(path) -> str:
    """Hex SHA-256 digest of a file's bytes."""
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def manifest_path(output_path) -> str:
    """Where the sidecar for a given output file lives."""
    return f"{output_path}.manifest.json"


@dataclasses.dataclass
class RunManifest:
    """Everything needed to audit or replay one command invocation.

    command:       argument vector after the program name
    version:       tool version that produced the outputs
    config_digest: SHA-256 of the canonical resolved configuration text
    config:        the canonical configuration text itself (or None)
    seeds:         name -> integer seed for every random stream used
    started/finished: UTC ISO-8601 timestamps
    outputs:       output path -> SHA-256 of the written bytes
    """

    command: list
    version: str = __version__
    config_digest: str = ""
    config: str = ""
    seeds: dict = dataclasses.field(default_factory=dict)
    started: str = ""
    finished: str = ""
    outputs: dict = dataclasses.field(default_factory=dict)

    def record_output(self, path) -> None:
        """Digest a finished output file into the manifest."""
        self.outputs[str(path)] = sha256_file(path)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2,
                          sort_keys=True) + "\n"


def write_manifest(manifest: RunManifest, output_path) -> str:
    """Write the sidecar next to `output_path`; returns the sidecar path."""
    path = manifest_path(output_path)
    with open(path, "w") as fh:
        fh.write(manifest.to_json())
    return path


def load_manifest(path) -> RunManifest:
    """Read a sidecar back; raises ValueError on malformed content."""
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"malformed manifest: {exc}") from exc
    fields = {f.name for f in dataclasses.fields(RunManifest)}
    unknown = set(raw) - fields
    if unknown:
        raise ValueError(f"unknown manifest fields: {sorted(unknown)}")
    if "command" not in raw or not isinstance(raw["command"], list):
        raise ValueError("manifest must carry a command list")
    return RunManifest(**raw)
