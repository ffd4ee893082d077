"""
Run manifest.

Every command appends one JSON line to <output_dir>/manifest.jsonl describing
what it read, which seeds and versions it used, and what it wrote. The
manifest is the only artifact carrying the run id; everything else stays
byte-identical across reruns.
"""

import hashlib
import json
import platform
from collections.abc import Iterable, Mapping
from importlib import metadata
from pathlib import Path
from typing import Any

from nidslabel import __version__
from nidslabel.core.logging import get_logger
from nidslabel.core.run_context import get_run_id

logger = get_logger(__name__)

MANIFEST_NAME = "manifest.jsonl"

_LIBRARIES = ("numpy", "pandas", "scikit-learn", "scipy", "joblib", "pydantic", "httpx", "jinja2")


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def library_versions() -> dict[str, str]:
    versions = {"nidslabel": __version__, "python": platform.python_version()}
    for name in _LIBRARIES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


def append_manifest(
    output_dir: str | Path,
    command: str,
    arguments: Mapping[str, Any],
    inputs: Iterable[str | Path],
    outputs: Iterable[str | Path],
    seeds: Mapping[str, int],
    catalog_version: str | None = None,
    template_version: str | None = None,
    error: Mapping[str, Any] | None = None,
) -> Path:
    """
    Append one run record.

    Args:
        output_dir: Directory holding manifest.jsonl
        command: CLI command name
        arguments: Effective arguments, secrets already removed
        inputs: Files read; recorded with their SHA-256
        outputs: Files written
        seeds: Named seeds used by the run
        catalog_version: Version string of the loaded catalog
        template_version: Prompt template version, for LLM commands
        error: Code and message of a failed run; None marks success

    Returns:
        Path of the manifest file
    """
    record = {
        "run_id": get_run_id(),
        "command": command,
        "arguments": {k: str(v) if isinstance(v, Path) else v for k, v in arguments.items()},
        "inputs": {str(p): file_sha256(p) for p in inputs if Path(p).is_file()},
        "outputs": sorted(str(p) for p in outputs),
        "seeds": dict(seeds),
        "versions": library_versions(),
        "catalog_version": catalog_version,
        "template_version": template_version,
        "status": "failed" if error else "ok",
        "error": dict(error) if error else None,
    }
    path = Path(output_dir) / MANIFEST_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as handle:
        handle.write(json.dumps(record, sort_keys=True, default=str) + "\n")
    logger.debug("Appended run %s to %s", record["run_id"], path)
    return path
