"""Corpus files: paired scenes and schemas with split assignment.

On disk a corpus is a directory holding ``corpus.jsonl`` plus one
features file and one masks file per scene (numpy .npy: little-endian
float64 / uint8 with a shape header). The jsonl starts with a versioned
header record carrying the property space; every following line is one
{scene_id, split, schema, features, masks} record with paths relative to
the corpus directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .schema import PropertySpace, SchemaInstance, SchemaError, parse_schema, serialize_schema

FORMAT_NAME = "slotground-corpus"
FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")


class CorpusError(ValueError):
    pass


@dataclass
class ScenePair:
    scene_id: str
    split: str
    schema: SchemaInstance
    features_path: str
    masks_path: str


@dataclass
class Corpus:
    space: PropertySpace
    pairs: list[ScenePair] = field(default_factory=list)
    root: Path | None = None

    def __post_init__(self):
        ids = [p.scene_id for p in self.pairs]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise CorpusError(f"duplicate scene ids: {dupes}")
        for p in self.pairs:
            if p.split not in SPLITS:
                raise CorpusError(f"scene {p.scene_id}: unknown split {p.split!r}")

    def split(self, name: str) -> list[ScenePair]:
        return [p for p in self.pairs if p.split == name]

    def features(self, pair: ScenePair) -> np.ndarray:
        return np.load(self._resolve(pair.features_path))

    def masks(self, pair: ScenePair) -> np.ndarray:
        return np.load(self._resolve(pair.masks_path))

    def _resolve(self, rel: str) -> Path:
        if self.root is None:
            raise CorpusError("corpus has no root directory; load it from disk first")
        return self.root / rel


def save_corpus(corpus: Corpus, directory) -> Path:
    """Write corpus.jsonl under `directory` (feature files are not copied)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "corpus.jsonl"
    with open(path, "w") as fh:
        header = {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "property_space": corpus.space.to_dict(),
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for pair in corpus.pairs:
            record = {
                "scene_id": pair.scene_id,
                "split": pair.split,
                "schema": serialize_schema(pair.schema, corpus.space),
                "features": pair.features_path,
                "masks": pair.masks_path,
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return path


def load_corpus(directory) -> Corpus:
    """Load and validate a corpus; every schema is re-parsed and checked."""
    directory = Path(directory)
    path = directory / "corpus.jsonl" if directory.is_dir() else directory
    if not path.exists():
        raise CorpusError(f"no corpus file at {path}")
    root = path.parent
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise CorpusError(f"{path} is empty")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise CorpusError(f"malformed header record: {e}") from e
    if header.get("format") != FORMAT_NAME:
        raise CorpusError(f"not a {FORMAT_NAME} file: {path}")
    if header.get("version") != FORMAT_VERSION:
        raise CorpusError(f"unsupported corpus version {header.get('version')}")
    space = PropertySpace.from_dict(header["property_space"])

    pairs: list[ScenePair] = []
    for idx, line in enumerate(lines[1:], start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            schema = parse_schema(rec["schema"], space)
            pairs.append(
                ScenePair(
                    scene_id=rec["scene_id"],
                    split=rec["split"],
                    schema=schema,
                    features_path=rec["features"],
                    masks_path=rec["masks"],
                )
            )
        except (KeyError, json.JSONDecodeError, SchemaError, TypeError) as e:
            raise CorpusError(f"malformed record {idx}: {e}") from e
    return Corpus(space=space, pairs=pairs, root=root)
