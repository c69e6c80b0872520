"""File formats: observation/label/match JSON, measurement CSV, datasets.

All JSON is written canonically (sorted keys, two-space indent, trailing
newline) through an atomic replace, so identical inputs always produce
identical bytes and a crashed write never leaves a half-file.  Arrays
travel as little-endian float64 bytes in base64 with an explicit shape.

A dataset is a directory holding a manifest.  A *thin* dataset stores
only the generator config and index lists (pairs are re-rendered on
demand, bit-identically); a *materialized* dataset additionally writes
every observation pair to disk and reloads without the generator.
"""

import base64
import csv
import dataclasses
import json
import os

import numpy as np

from .assoc.types import ClusterObservation, DetectionNode, MatchSet, PairLabels
from .synth import SceneConfig, SyntheticPairs

__all__ = [
    "SchemaError",
    "SCHEMA_OBSERVATION",
    "SCHEMA_LABELS",
    "SCHEMA_MATCHES",
    "SCHEMA_DATASET",
    "SCHEMA_REPORT",
    "write_json",
    "read_json",
    "encode_array",
    "decode_array",
    "observation_to_dict",
    "observation_from_dict",
    "save_observation",
    "load_observation",
    "labels_to_dict",
    "labels_from_dict",
    "matchset_to_dict",
    "matchset_from_dict",
    "MEASUREMENT_FIELDS",
    "write_measurements_csv",
    "read_measurements_csv",
    "save_dataset",
    "load_dataset",
    "DatasetBundle",
    "MaterializedPairs",
    "LabeledPair",
]

SCHEMA_OBSERVATION = "fruitlets-observation"
SCHEMA_LABELS = "fruitlets-pair-labels"
SCHEMA_MATCHES = "fruitlets-matches"
SCHEMA_DATASET = "fruitlets-dataset"
SCHEMA_REPORT = "fruitlets-abscission-report"
SCHEMA_VERSION = 1


class SchemaError(ValueError):
    """A file exists but is not a valid document of the expected kind."""


def write_json(obj, path: str) -> str:
    blob = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    return path


def read_json(path: str):
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as e:
            raise SchemaError(f"{path}: not valid JSON ({e})") from e


def _expect(doc, schema: str, source: str):
    if not isinstance(doc, dict) or doc.get("schema") != schema:
        raise SchemaError(f"{source}: expected a {schema!r} document")
    if doc.get("version") != SCHEMA_VERSION:
        raise SchemaError(f"{source}: unsupported version {doc.get('version')!r}")


def encode_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {
        "shape": list(arr.shape),
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def decode_array(entry: dict, source: str = "array") -> np.ndarray:
    try:
        shape = tuple(int(s) for s in entry["shape"])
        raw = base64.b64decode(entry["data"])
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"{source}: bad array entry ({e})") from e
    expected = int(np.prod(shape, dtype=np.int64)) * 8
    if len(raw) != expected:
        raise SchemaError(f"{source}: array payload is {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()


def _node_to_dict(node: DetectionNode) -> dict:
    out = {
        "bbox": list(node.bbox),
        "score": node.score,
        "is_tag": node.is_tag,
        "is_cluster": node.is_cluster,
        "fruitlet_id": node.fruitlet_id,
        "positional": encode_array(node.positional),
        "visual": encode_array(node.visual),
    }
    if node.mask_crop is not None:
        out["mask_crop"] = encode_array(node.mask_crop)
    if node.disparity_crop is not None:
        out["disparity_crop"] = encode_array(node.disparity_crop)
    return out


def _node_from_dict(entry: dict, source: str) -> DetectionNode:
    try:
        return DetectionNode(
            bbox=tuple(int(v) for v in entry["bbox"]),
            score=float(entry["score"]),
            is_tag=bool(entry["is_tag"]),
            is_cluster=bool(entry["is_cluster"]),
            positional=decode_array(entry["positional"], source),
            visual=decode_array(entry["visual"], source),
            fruitlet_id=entry.get("fruitlet_id"),
            mask_crop=(
                decode_array(entry["mask_crop"], source) if "mask_crop" in entry else None
            ),
            disparity_crop=(
                decode_array(entry["disparity_crop"], source)
                if "disparity_crop" in entry
                else None
            ),
        )
    except SchemaError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"{source}: bad node entry ({e})") from e


def observation_to_dict(obs: ClusterObservation) -> dict:
    return {
        "schema": SCHEMA_OBSERVATION,
        "version": SCHEMA_VERSION,
        "cluster_id": obs.cluster_id,
        "day": obs.day,
        "image_width": obs.image_width,
        "image_height": obs.image_height,
        "nodes": [_node_to_dict(n) for n in obs.nodes],
    }


def observation_from_dict(doc: dict, source: str = "observation") -> ClusterObservation:
    _expect(doc, SCHEMA_OBSERVATION, source)
    try:
        return ClusterObservation(
            cluster_id=str(doc["cluster_id"]),
            day=str(doc["day"]),
            image_width=int(doc["image_width"]),
            image_height=int(doc["image_height"]),
            nodes=[_node_from_dict(n, source) for n in doc["nodes"]],
        )
    except SchemaError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"{source}: bad observation ({e})") from e


def save_observation(obs: ClusterObservation, path: str) -> str:
    return write_json(observation_to_dict(obs), path)


def load_observation(path: str) -> ClusterObservation:
    return observation_from_dict(read_json(path), source=path)


def labels_to_dict(labels: PairLabels) -> dict:
    return {
        "schema": SCHEMA_LABELS,
        "version": SCHEMA_VERSION,
        "matches": [list(p) for p in labels.matches],
        "unmatched_a": list(labels.unmatched_a),
        "unmatched_b": list(labels.unmatched_b),
    }


def labels_from_dict(doc: dict, source: str = "labels") -> PairLabels:
    _expect(doc, SCHEMA_LABELS, source)
    try:
        return PairLabels(
            matches=tuple((int(i), int(j)) for i, j in doc["matches"]),
            unmatched_a=tuple(int(i) for i in doc["unmatched_a"]),
            unmatched_b=tuple(int(j) for j in doc["unmatched_b"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"{source}: bad labels ({e})") from e


def matchset_to_dict(ms: MatchSet, threshold: float) -> dict:
    return {
        "schema": SCHEMA_MATCHES,
        "version": SCHEMA_VERSION,
        "threshold": threshold,
        "pairs": [[int(i), int(j), float(p)] for i, j, p in ms.pairs],
        "unmatched_a": list(ms.unmatched_a),
        "unmatched_b": list(ms.unmatched_b),
    }


def matchset_from_dict(doc: dict, source: str = "matches") -> tuple:
    """Returns (MatchSet, threshold)."""
    _expect(doc, SCHEMA_MATCHES, source)
    try:
        ms = MatchSet(
            pairs=tuple((int(i), int(j), float(p)) for i, j, p in doc["pairs"]),
            unmatched_a=tuple(int(i) for i in doc["unmatched_a"]),
            unmatched_b=tuple(int(j) for j in doc["unmatched_b"]),
        )
        return ms, float(doc["threshold"])
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"{source}: bad match set ({e})") from e


MEASUREMENT_FIELDS = [
    "cluster_id",
    "day",
    "node_index",
    "fruitlet_id",
    "diameter_mm",
    "minor_px",
    "major_px",
    "angle",
    "disparity_px",
    "baseline_mm",
]


def write_measurements_csv(rows, path: str) -> str:
    """Write measurement dicts (MEASUREMENT_FIELDS keys) atomically."""
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MEASUREMENT_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in MEASUREMENT_FIELDS})
    os.replace(tmp, path)
    return path


def read_measurements_csv(path: str) -> list:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(MEASUREMENT_FIELDS) - set(reader.fieldnames):
            raise SchemaError(f"{path}: not a measurement table")
        rows = []
        for raw in reader:
            row = dict(raw)
            row["node_index"] = int(raw["node_index"])
            for key in ("diameter_mm", "minor_px", "major_px", "angle",
                        "disparity_px", "baseline_mm"):
                row[key] = float(raw[key])
            rows.append(row)
        return rows


@dataclasses.dataclass(frozen=True)
class LabeledPair:
    """Minimal truth wrapper used by materialized datasets."""

    labels: PairLabels


class MaterializedPairs:
    """Reads observation pairs saved by :func:`save_dataset`."""

    def __init__(self, directory: str, names):
        self.directory = directory
        self.names = list(names)

    def __len__(self):
        return len(self.names)

    def __getitem__(self, i: int):
        base = os.path.join(self.directory, "pairs", self.names[i])
        obs_a = load_observation(os.path.join(base, "obs_a.json"))
        obs_b = load_observation(os.path.join(base, "obs_b.json"))
        labels = labels_from_dict(
            read_json(os.path.join(base, "labels.json")),
            source=os.path.join(base, "labels.json"),
        )
        return obs_a, obs_b, LabeledPair(labels=labels)


def _config_to_dict(config: SceneConfig) -> dict:
    out = {}
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


def _config_from_dict(entry: dict, source: str) -> SceneConfig:
    if not isinstance(entry, dict):
        raise SchemaError(f"{source}: scene_config must be an object")
    known = {f.name: f for f in dataclasses.fields(SceneConfig)}
    unknown = set(entry) - set(known)
    if unknown:
        raise SchemaError(f"{source}: unknown scene_config fields {sorted(unknown)}")
    kwargs = {}
    for name, value in entry.items():
        default = known[name].default
        kwargs[name] = tuple(value) if isinstance(default, tuple) else value
    try:
        return SceneConfig(**kwargs)
    except (TypeError, ValueError) as e:
        raise SchemaError(f"{source}: bad scene_config ({e})") from e


@dataclasses.dataclass(frozen=True)
class DatasetBundle:
    directory: str
    config: SceneConfig
    splits: dict
    materialized: bool
    with_raw: bool

    def pairs(self, split: str):
        if split not in self.splits:
            raise ValueError(f"dataset has no split {split!r}; has {sorted(self.splits)}")
        indices = self.splits[split]
        if self.materialized:
            return MaterializedPairs(
                self.directory, [f"{split}-{idx:05d}" for idx in indices]
            )
        return SyntheticPairs(self.config, indices, with_raw=self.with_raw)


def save_dataset(
    config: SceneConfig,
    splits: dict,
    directory: str,
    materialize: bool = False,
    with_raw: bool = False,
) -> str:
    """Write a dataset directory; returns the manifest path.

    splits maps split name -> list of generator pair indices.  With
    ``materialize`` every pair is also rendered and saved under pairs/.
    """
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "schema": SCHEMA_DATASET,
        "version": SCHEMA_VERSION,
        "scene_config": _config_to_dict(config),
        "splits": {name: [int(i) for i in idx] for name, idx in splits.items()},
        "materialized": bool(materialize),
        "with_raw": bool(with_raw),
    }
    if materialize:
        from .synth import gen_pair

        for name, idx in splits.items():
            for i in idx:
                base = os.path.join(directory, "pairs", f"{name}-{int(i):05d}")
                os.makedirs(base, exist_ok=True)
                obs_a, obs_b, truth = gen_pair(config, int(i), with_raw=with_raw)
                save_observation(obs_a, os.path.join(base, "obs_a.json"))
                save_observation(obs_b, os.path.join(base, "obs_b.json"))
                write_json(labels_to_dict(truth.labels), os.path.join(base, "labels.json"))
    return write_json(manifest, os.path.join(directory, "manifest.json"))


def load_dataset(directory: str) -> DatasetBundle:
    path = os.path.join(directory, "manifest.json")
    doc = read_json(path)
    _expect(doc, SCHEMA_DATASET, path)
    try:
        config = _config_from_dict(doc["scene_config"], path)
        splits = {str(k): [int(i) for i in v] for k, v in doc["splits"].items()}
        return DatasetBundle(
            directory=directory,
            config=config,
            splits=splits,
            materialized=bool(doc["materialized"]),
            with_raw=bool(doc["with_raw"]),
        )
    except SchemaError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"{path}: bad dataset manifest ({e})") from e
