"""CSV and manifest writers for scenario runs.

CSV bodies depend only on the scenario file and seed: floats are written
with ``repr`` (shortest round-trip form), rows keep the order they were
produced in and the manifest carries no timestamps.
"""

import csv
import json
import platform
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
import pydantic
import scipy


def format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def write_csv(path: Path, rows: Sequence[Dict[str, Any]], fieldnames: Optional[List[str]] = None,
              comments: Iterable[str] = ()) -> Path:
    """Write ``rows`` with a header; ``comments`` become leading ``# `` lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fieldnames is None:
        fieldnames = []
        for row in rows:
            for key in row:
                if key not in fieldnames:
                    fieldnames.append(key)
    with path.open("w", encoding="utf-8", newline="") as f:
        for line in comments:
            f.write(f"# {line}\n")
        w = csv.DictWriter(f, fieldnames=fieldnames, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: format_value(row.get(k)) for k in fieldnames})
    return path


def package_versions() -> Dict[str, str]:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pydantic": pydantic.VERSION,
    }


def write_manifest(path: Path, *, scenario: str, sha256: str, seed: int, analyses: Sequence[str],
                   outputs: Sequence[str], scores: Dict[str, float]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "scenario": scenario,
        "sha256": sha256,
        "seed": seed,
        "analyses": list(analyses),
        "outputs": sorted(outputs),
        "scores": {k: float(v) for k, v in sorted(scores.items())},
        "versions": package_versions(),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
