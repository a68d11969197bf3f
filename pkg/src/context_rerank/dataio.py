"""Dataset file format, validation, and the synthetic scene generator.

The on-disk format is line-delimited JSON: a header record carrying the
format version and embedding dimensions, then one scene per line with part
vectors hex-encoded as little-endian float64. Encoding is canonicalized
(sorted keys, no whitespace) so identical datasets are identical bytes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embeddings import Instance, PartEmbedding, R_PARTS, Scene
from .errors import ConfigError, DataError

FORMAT_VERSION = 1


@dataclass(frozen=True)
class DatasetManifest:
    format_version: int
    d: int
    r: int = R_PARTS

    def __post_init__(self):
        if self.r != R_PARTS:
            raise DataError(f"dataset declares R={self.r}, this pipeline requires R={R_PARTS}")
        if self.d < 2:
            raise DataError(f"embedding dimension must be >= 2, got {self.d}")


@dataclass(frozen=True)
class Dataset:
    d: int
    scenes: tuple

    @property
    def manifest(self) -> DatasetManifest:
        return DatasetManifest(FORMAT_VERSION, self.d)

    def scene_by_id(self, scene_id: str) -> Scene:
        for s in self.scenes:
            if s.scene_id == scene_id:
                return s
        raise DataError(f"no scene {scene_id!r} in dataset")


def _encode_parts(parts: np.ndarray) -> str:
    return np.ascontiguousarray(parts, dtype="<f8").tobytes().hex()


def _decode_parts(blob: str, d: int) -> np.ndarray:
    raw = bytes.fromhex(blob)
    expected = R_PARTS * d * 8
    if len(raw) != expected:
        raise DataError(f"part vector blob has {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f8").reshape(R_PARTS, d).astype(np.float64)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_dataset(dataset: Dataset, path):
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        f.write(_dump({"format_version": FORMAT_VERSION, "d": dataset.d, "r": R_PARTS}) + "\n")
        for scene in dataset.scenes:
            record = {
                "scene_id": scene.scene_id,
                "camera_id": scene.camera_id,
                "instances": [
                    {
                        "instance_id": i.instance_id,
                        "box": list(i.box),
                        "identity": i.identity,
                        "parts": _encode_parts(i.embedding.parts),
                    }
                    for i in scene.instances
                ],
            }
            f.write(_dump(record) + "\n")


def load_dataset(path) -> Dataset:
    path = Path(path)
    scenes = []
    seen_instance_ids = set()
    seen_scene_ids = set()
    with open(path, "r", encoding="utf-8") as f:
        lines = f.readlines()
    if not lines:
        raise DataError(f"{path}: empty file (missing header record)")

    def parse(line_no, text):
        try:
            return json.loads(text)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}:{line_no}: parse error: {e}") from e

    header = parse(1, lines[0])
    manifest = DatasetManifest(
        format_version=header.get("format_version", -1),
        d=header.get("d", 0),
        r=header.get("r", R_PARTS),
    )
    if manifest.format_version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format_version {manifest.format_version}")

    for line_no, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        rec = parse(line_no, text)
        scene_id = rec["scene_id"]
        if scene_id in seen_scene_ids:
            raise DataError(f"{path}:{line_no}: duplicate scene_id {scene_id!r}")
        seen_scene_ids.add(scene_id)
        instances = []
        for irec in rec["instances"]:
            iid = irec["instance_id"]
            if iid in seen_instance_ids:
                raise DataError(f"{path}:{line_no}: duplicate instance_id {iid!r}")
            seen_instance_ids.add(iid)
            emb = PartEmbedding.from_array(
                _decode_parts(irec["parts"], manifest.d), context=f" of instance {iid}"
            )
            instances.append(
                Instance(
                    instance_id=iid,
                    scene_id=scene_id,
                    box=tuple(irec["box"]),
                    identity=irec["identity"],
                    embedding=emb,
                )
            )
        scenes.append(Scene(scene_id=scene_id, camera_id=rec["camera_id"], instances=tuple(instances)))
    return Dataset(d=manifest.d, scenes=tuple(scenes))


# -- synthetic generator -------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the desk-scale synthetic person-search benchmark.

    Identities come in lookalike appearance clusters (hard negatives) and
    travel in groups: a group seen by camera c moves on to the next camera
    with ``co_travel_prob``, so cross-camera positives carry co-traveler
    context. Occluded parts are resampled near shared occluder directions.
    """

    num_identities: int = 200
    num_cameras: int = 6
    scenes_per_camera: int = 60
    instances_per_scene: int = 6  # soft cap per scene
    group_size_mean: float = 3.0
    co_travel_prob: float = 0.8
    view_noise_sigma: float = 0.35
    part_dropout_prob: float = 0.25
    seed: int = 42
    dim: int = 64
    lookalike_group: int = 5
    lookalike_overlap: float = 0.97

    def __post_init__(self):
        for name in ("num_identities", "num_cameras", "scenes_per_camera", "instances_per_scene"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("co_travel_prob", "part_dropout_prob", "lookalike_overlap"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.view_noise_sigma < 0:
            raise ConfigError(f"view_noise_sigma must be >= 0, got {self.view_noise_sigma}")
        if self.group_size_mean < 1:
            raise ConfigError(f"group_size_mean must be >= 1, got {self.group_size_mean}")
        if self.instances_per_scene > self.num_identities:
            raise ConfigError(
                f"instances_per_scene ({self.instances_per_scene}) cannot exceed "
                f"num_identities ({self.num_identities})"
            )
        if self.dim < 2:
            raise ConfigError(f"dim must be >= 2, got {self.dim}")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _random_unit(rng, d):
    return _unit(rng.normal(size=d))


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    """Deterministic synthetic dataset per the travel-group model above."""
    rng = np.random.default_rng(cfg.seed)
    d = cfg.dim

    # identity prototypes, clustered so lookalikes exist
    n_clusters = math.ceil(cfg.num_identities / cfg.lookalike_group)
    centers = np.stack([[_random_unit(rng, d) for _ in range(R_PARTS)] for _ in range(n_clusters)])
    rho = cfg.lookalike_overlap
    protos = np.empty((cfg.num_identities, R_PARTS, d))
    for ident in range(cfg.num_identities):
        c = ident // cfg.lookalike_group
        for r in range(R_PARTS):
            protos[ident, r] = _unit(
                math.sqrt(rho) * centers[c, r] + math.sqrt(1.0 - rho) * _random_unit(rng, d)
            )

    # shared occluder directions per non-whole part
    occluders = np.stack([_random_unit(rng, d) for _ in range(R_PARTS)])

    # travel groups
    order = rng.permutation(cfg.num_identities)
    groups = []
    # a mean of >= 2 promises every traveler a companion (true context exists)
    min_size = 2 if cfg.group_size_mean >= 2 else 1
    i = 0
    while i < len(order):
        size = max(min_size, int(round(rng.normal(cfg.group_size_mean, 1.0))))
        groups.append(list(order[i : i + size]))
        i += size
    if len(groups) > 1 and len(groups[-1]) < min_size:
        groups[-2].extend(groups.pop())

    # group routes over neighboring cameras
    scene_members = [
        [[] for _ in range(cfg.scenes_per_camera)] for _ in range(cfg.num_cameras)
    ]
    for group in groups:
        cam = int(rng.integers(cfg.num_cameras))
        for _visit in range(cfg.num_cameras):
            start = int(rng.integers(cfg.scenes_per_camera))
            slot = start
            for probe in range(cfg.scenes_per_camera):  # prefer scenes with room
                slot = (start + probe) % cfg.scenes_per_camera
                if len(scene_members[cam][slot]) + len(group) <= cfg.instances_per_scene:
                    break
            scene_members[cam][slot].extend(group)
            if rng.random() >= cfg.co_travel_prob:
                break
            cam = (cam + 1) % cfg.num_cameras

    noise_std = cfg.view_noise_sigma / math.sqrt(d)
    scenes = []
    for cam in range(cfg.num_cameras):
        for slot in range(cfg.scenes_per_camera):
            members = scene_members[cam][slot]
            if not members:
                continue
            scene_id = f"s{cam:02d}_{slot:03d}"
            instances = []
            for n, ident in enumerate(members):
                parts = np.empty((R_PARTS, d))
                for r in range(R_PARTS):
                    parts[r] = _unit(protos[ident, r] + rng.normal(0.0, noise_std, size=d))
                if rng.random() < cfg.part_dropout_prob:
                    r_bad = int(rng.integers(1, R_PARTS))
                    parts[r_bad] = _unit(
                        math.sqrt(rho) * occluders[r_bad]
                        + math.sqrt(1.0 - rho) * _random_unit(rng, d)
                    )
                instances.append(
                    Instance(
                        instance_id=f"{scene_id}_i{n:02d}",
                        scene_id=scene_id,
                        box=(10.0 + 70.0 * n, 10.0, 60.0, 120.0),
                        identity=int(ident),
                        embedding=PartEmbedding.from_array(parts),
                    )
                )
            scenes.append(Scene(scene_id=scene_id, camera_id=f"cam{cam:02d}", instances=tuple(instances)))
    return Dataset(d=d, scenes=tuple(scenes))


def validate(dataset: Dataset) -> dict:
    """Report-only structural statistics and warnings."""
    identities = set()
    n_instances = 0
    singleton_scenes = 0
    scenes_by_identity = {}
    for s in dataset.scenes:
        if len(s.instances) == 1:
            singleton_scenes += 1
        for i in s.instances:
            n_instances += 1
            if i.identity is not None:
                identities.add(i.identity)
                scenes_by_identity.setdefault(i.identity, []).append(s)

    cross_camera_positive_pairs = 0
    graph_trainable_pairs = 0
    for ident, scene_list in scenes_by_identity.items():
        for i in range(len(scene_list)):
            for j in range(i + 1, len(scene_list)):
                a, b = scene_list[i], scene_list[j]
                if a.scene_id == b.scene_id:
                    continue
                if a.camera_id != b.camera_id:
                    cross_camera_positive_pairs += 1
                if len(a.instances) > 1 and len(b.instances) > 1:
                    graph_trainable_pairs += 1

    warnings = []
    if graph_trainable_pairs == 0:
        warnings.append("zero graph-trainable pairs: every positive pair involves a singleton scene")
    return {
        "num_scenes": len(dataset.scenes),
        "num_instances": n_instances,
        "num_identities": len(identities),
        "singleton_scenes": singleton_scenes,
        "cross_camera_positive_pairs": cross_camera_positive_pairs,
        "graph_trainable_pairs": graph_trainable_pairs,
        "warnings": warnings,
    }
