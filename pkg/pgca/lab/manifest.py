"""manifest.json: every artifact of a run with its sha256, plus run status."""

import hashlib
import json
import os

MANIFEST_NAME = "manifest.json"


def _manifest_path(run_dir):
    return os.path.join(run_dir, MANIFEST_NAME)


def sha256_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


class RunManifest:
    def __init__(self, run_dir):
        self.run_dir = run_dir
        self.artifacts = {}
        self.status = "incomplete"
        self.failed_phase = None
        self.phases = []

    @classmethod
    def open(cls, run_dir):
        """Continues an earlier manifest so separate subcommands accumulate."""
        manifest = cls(run_dir)
        if os.path.isfile(_manifest_path(run_dir)):
            data = load_manifest(run_dir)
            manifest.artifacts = dict(data.get("artifacts", {}))
            manifest.phases = list(data.get("phases", []))
        return manifest

    def record(self, path):
        """Adds (or refreshes) an artifact; paths are stored run-relative."""
        rel = os.path.relpath(path, self.run_dir).replace(os.sep, "/")
        self.artifacts[rel] = sha256_file(path)
        return rel

    def phase_done(self, phase):
        if phase not in self.phases:
            self.phases.append(phase)

    def as_dict(self):
        return {
            "status": self.status,
            "failed_phase": self.failed_phase,
            "phases": list(self.phases),
            "artifacts": dict(sorted(self.artifacts.items())),
        }

    def write(self, status, failed_phase=None):
        self.status = status
        self.failed_phase = failed_phase
        os.makedirs(self.run_dir, exist_ok=True)
        path = _manifest_path(self.run_dir)
        with open(path, "w") as f:
            json.dump(self.as_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        return path


def load_manifest(run_dir):
    with open(_manifest_path(run_dir)) as f:
        return json.load(f)


def verify(run_dir):
    """List of problems: missing files and checksum mismatches. Empty means
    every recorded artifact matches."""
    if not os.path.isfile(_manifest_path(run_dir)):
        return [f"no {MANIFEST_NAME} in {run_dir}"]
    manifest = load_manifest(run_dir)
    problems = []
    for rel, expected in sorted(manifest["artifacts"].items()):
        path = os.path.join(run_dir, rel)
        if not os.path.isfile(path):
            problems.append(f"missing artifact {rel}")
        elif sha256_file(path) != expected:
            problems.append(f"checksum mismatch for {rel}")
    if manifest["status"] != "complete":
        problems.append(f"run is {manifest['status']} (failed phase: {manifest['failed_phase']})")
    return problems
