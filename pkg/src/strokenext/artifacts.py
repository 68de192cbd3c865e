"""Atomic artifact writing and run manifests."""

import json
import os
import tempfile
from datetime import datetime, timezone
from pathlib import Path

from . import __version__

SCHEMA_VERSION = 1


def atomic_write_bytes(data, path):
    """Stage to a temp file in the target directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(obj, path):
    atomic_write_bytes((json.dumps(obj, indent=2, sort_keys=True) + "\n").encode(), path)


def stamp(obj, manifest_ref):
    """Attach the standard provenance keys to a report dict."""
    obj = dict(obj)
    obj["tool_version"] = __version__
    obj["schema_version"] = SCHEMA_VERSION
    obj["manifest_ref"] = str(manifest_ref)
    return obj


def manifest_path_for(output):
    output = Path(output)
    return output.parent / (output.name + ".run.json")


def write_manifest(command, config, outputs, started, seed=None):
    """One manifest per command, written next to the primary output."""
    primary = Path(outputs[0])
    path = manifest_path_for(primary)
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
        "artifacts": [str(o) for o in outputs],
        "tool_version": __version__,
        "schema_version": SCHEMA_VERSION,
    }
    atomic_write_json(manifest, path)
    return path


def utcnow():
    return datetime.now(timezone.utc).isoformat()
