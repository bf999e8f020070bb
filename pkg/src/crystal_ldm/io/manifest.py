"""Dataset manifests: one ``<split>\\t<path>`` line per structure file.

The first line is ``# seed=<int>``. Paths are stored as written (relative
paths resolve against the manifest's directory).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPLITS = ("train", "val", "test")


@dataclass
class DatasetManifest:
    entries: list[tuple[str, str]] = field(default_factory=list)
    seed: int = 0
    root: Path | None = None

    def __post_init__(self):
        seen = set()
        for path, tag in self.entries:
            if tag not in SPLITS:
                raise ValueError(f"unknown split tag {tag!r} for {path}")
            if path in seen:
                raise ValueError(f"duplicate manifest path {path}")
            seen.add(path)

    def paths(self, split: str | None = None) -> list[Path]:
        base = self.root or Path(".")
        return [base / p for p, tag in self.entries if split is None or tag == split]


def split_entries(paths: list[str], seed: int, fractions=(0.8, 0.1, 0.1)) -> DatasetManifest:
    """Random split with the given train/val/test fractions (test takes the remainder)."""
    n = len(paths)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    tags = np.empty(n, dtype=object)
    tags[order[:n_train]] = "train"
    tags[order[n_train:n_train + n_val]] = "val"
    tags[order[n_train + n_val:]] = "test"
    return DatasetManifest([(p, str(t)) for p, t in zip(paths, tags)], seed)


def write_manifest(path, manifest: DatasetManifest) -> None:
    lines = [f"# seed={manifest.seed}"] + [f"{tag}\t{p}" for p, tag in manifest.entries]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    seed = 0
    entries = []
    for k, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            if line.startswith("# seed="):
                seed = int(line.split("=", 1)[1])
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{k}: expected '<split>\\t<path>'")
        entries.append((parts[1], parts[0]))
    return DatasetManifest(entries, seed, root=path.parent)
