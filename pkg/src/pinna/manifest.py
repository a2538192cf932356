"""Run manifests: config/input/output hashes for reproducibility audits."""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    seed: int
    config_hash: str
    tool_version: str = __version__
    input_hashes: dict = field(default_factory=dict)
    output_hashes: dict = field(default_factory=dict)
    timings_s: dict = field(default_factory=dict)

    def add_input(self, name: str, path) -> None:
        self.input_hashes[str(name)] = sha256_file(path)

    def add_outputs(self, root) -> None:
        """Hash every file under `root` (relative names as keys)."""
        root = Path(root)
        for path in sorted(root.rglob("*")):
            if path.is_file() and path.name != "manifest.json":
                self.output_hashes[path.relative_to(root).as_posix()] = sha256_file(path)

    def write(self, out_dir) -> None:
        payload = {
            "tool_version": self.tool_version,
            "command": self.command,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "input_hashes": self.input_hashes,
            "output_hashes": self.output_hashes,
            "timings_s": self.timings_s,
        }
        (Path(out_dir) / "manifest.json").write_text(json.dumps(payload, indent=2) + "\n")


class StageTimer:
    def __init__(self, manifest: RunManifest):
        self.manifest = manifest

    @contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        yield
        self.manifest.timings_s[name] = time.perf_counter() - start


@contextmanager
def atomic_output_dir(out_dir, force: bool = False):
    """Write into a sibling temp dir; move it into place only on success."""
    out_dir = Path(out_dir)
    if out_dir.exists():
        if not force:
            raise FileExistsError(
                f"{out_dir} already exists (use --force to overwrite)"
            )
        shutil.rmtree(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(
        tempfile.mkdtemp(prefix=f".{out_dir.name}.partial-", dir=out_dir.parent)
    )
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    os.replace(tmp, out_dir)
