"""
Dataset construction and persistence.

Layout on disk:

    dataset_root/manifest.json            schema_version, role, dataset_seed, config_hash, lens_ids
    dataset_root/dataset.json             domain, sampling and generation parameters
    dataset_root/checksums.json           sha256 of every other file
    dataset_root/lens_<k>/lens.json       lens parameters and pre-aligned origin
    dataset_root/lens_<k>/samples.jsonl   one record per sample
    dataset_root/lens_<k>/images/<sample_id>_fov<i>.png
    dataset_root/audit/labels.sealed.json target-only ground truth, never read by load_dataset
"""

import dataclasses
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from ..core.errors import (
    ChecksumMismatchError,
    DatasetSchemaError,
    InvalidInputError,
    MissingArtifactError,
)
from ..core.imports import NUM_FOVS, SCHEMA_VERSION, cv2, tqdm
from ..core.seeding import derive_seed, make_rng
from ..core.serialization import config_hash, dump_json, from_jsonable
from .optics_sim import (
    ZERO_OFFSET,
    DomainConfig,
    LensInstance,
    MisalignmentOffset,
    draw_lens,
    simulate_capture,
)
from .prealign import prealign
from .sampling import SamplingConfig, grid_count, grid_positions

logger = logging.getLogger(__name__)

ROLES = ("source", "pseudo_target", "target_unlabeled", "oracle", "test")

# Lens id blocks keep training, target and evaluation lenses disjoint
SOURCE_LENS_BASE = 0
TARGET_LENS_BASE = 500
EVAL_LENS_BASE = 1000

_LENS_STREAM = 1
_RANDOM_POSITION_STREAM = 2


@dataclass
class Sample:
    sample_id: int
    label: Optional[MisalignmentOffset]
    images: np.ndarray
    rng_seed: int


@dataclass
class LensRecord:
    lens: LensInstance
    samples: List[Sample]
    origin: MisalignmentOffset = ZERO_OFFSET

    def __post_init__(self):
        ids = [s.sample_id for s in self.samples]
        if ids != list(range(len(ids))):
            raise InvalidInputError(f"lens {self.lens.lens_id}: sample ids must be contiguous from 0")


@dataclass
class Dataset:
    role: str
    domain: DomainConfig
    lenses: List[LensRecord]
    sampling: SamplingConfig
    dataset_seed: int
    generation: Dict = field(default_factory=dict)
    config_hash: str = ""
    audit_labels: Optional[Dict] = field(default=None, repr=False)

    def __post_init__(self):
        if self.role not in ROLES:
            raise InvalidInputError(f"dataset role {self.role!r} not in {ROLES}")
        if not self.config_hash:
            self.config_hash = dataset_config_hash(
                self.role, self.domain, self.sampling, self.dataset_seed, self.lens_ids, self.generation
            )

    @property
    def lens_ids(self):
        return [rec.lens.lens_id for rec in self.lenses]

    @property
    def labeled(self):
        return self.role != "target_unlabeled"

    @property
    def n_samples(self):
        return sum(len(rec.samples) for rec in self.lenses)

    def iter_samples(self):
        for rec in self.lenses:
            for sample in rec.samples:
                yield rec, sample

    def stacked_images(self):
        """(N, 5, H, W) float32 array in lens-then-sample order"""
        return np.stack([s.images for _, s in self.iter_samples()]).astype(np.float32)

    def stacked_labels(self):
        if not self.labeled:
            raise InvalidInputError(f"{self.role} dataset carries no labels")
        return np.array([s.label.as_tuple() for _, s in self.iter_samples()], dtype=np.float64)

    def sample_keys(self):
        return [(rec.lens.lens_id, s.sample_id) for rec, s in self.iter_samples()]

    def subset(self, lens_ids, role=None):
        wanted = set(lens_ids)
        records = [rec for rec in self.lenses if rec.lens.lens_id in wanted]
        generation = dict(self.generation, subset_of=self.config_hash)
        return Dataset(
            role=role or self.role,
            domain=self.domain,
            lenses=records,
            sampling=self.sampling,
            dataset_seed=self.dataset_seed,
            generation=generation,
        )


def dataset_config_hash(role, domain, sampling, dataset_seed, lens_ids, generation):
    return config_hash({
        "role": role,
        "domain": domain,
        "sampling": sampling,
        "dataset_seed": dataset_seed,
        "lens_ids": list(lens_ids),
        "generation": generation,
    })


def sample_seed(dataset_seed, lens_id, sample_id):
    return derive_seed(dataset_seed, lens_id, sample_id)


def lens_seed(dataset_seed, lens_id):
    return derive_seed(dataset_seed, lens_id, _LENS_STREAM)


def _lens_origin(lens, domain, sampling):
    if not sampling.prealign:
        return ZERO_OFFSET
    return prealign(lens, domain, sampling.prealign_range_um, sampling.prealign_step_um)


def _render_lens(lens, positions, domain, sampling, dataset_seed, labeled, workers):
    """Capture one lens at every position (relative to its pre-aligned origin)"""
    origin = _lens_origin(lens, domain, sampling)
    seeds = [sample_seed(dataset_seed, lens.lens_id, sid) for sid in range(len(positions))]

    def capture(args):
        pos, seed = args
        return simulate_capture(origin + pos, lens, domain, seed).images.astype(np.float32)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        images = list(tqdm(pool.map(capture, zip(positions, seeds)), total=len(positions),
                           desc=f"lens {lens.lens_id}", leave=False))

    samples = [
        Sample(sample_id=sid, label=pos if labeled else None, images=img, rng_seed=seed)
        for sid, (pos, img, seed) in enumerate(zip(positions, images, seeds))
    ]
    return LensRecord(lens=lens, samples=samples, origin=origin)


def build_source_dataset(domain, m_tolerance_lenses, sampling, dataset_seed, workers=None):
    """Ideal lens plus M tolerance-perturbed lenses, each densely grid-sampled"""
    if m_tolerance_lenses < 0:
        raise InvalidInputError("m_tolerance_lenses must be >= 0")
    domain.validate()
    positions = grid_positions(sampling.range_um, sampling.step_um)

    records = []
    for k in range(m_tolerance_lenses + 1):
        lens_id = SOURCE_LENS_BASE + k
        lens = draw_lens(lens_id, lens_seed(dataset_seed, lens_id), sampling.tolerance)
        records.append(_render_lens(lens, positions, domain, sampling, dataset_seed, True, workers))

    logger.info("Built source dataset: %d lenses x %d positions", len(records), len(positions))
    return Dataset(
        role="source",
        domain=domain,
        lenses=records,
        sampling=sampling,
        dataset_seed=dataset_seed,
        generation={"m_tolerance_lenses": m_tolerance_lenses},
    )


def build_target_dataset(domain, n_random, dataset_seed, sampling, workers=None):
    """One real-like lens captured at a few random, unlabeled positions"""
    if n_random < 1:
        raise InvalidInputError("n_random must be >= 1")
    n_grid = grid_count(sampling.range_um, sampling.step_um)
    if n_random > n_grid / 4:
        raise InvalidInputError(f"n_random={n_random} exceeds a quarter of the {n_grid}-position grid")
    domain.validate()

    lens_id = TARGET_LENS_BASE
    lens = draw_lens(lens_id, lens_seed(dataset_seed, lens_id), sampling.tolerance)
    rng = make_rng(dataset_seed, lens_id, _RANDOM_POSITION_STREAM)
    coords = rng.uniform(-sampling.range_um, sampling.range_um, size=(n_random, 2))
    positions = [MisalignmentOffset(float(x), float(y)) for x, y in coords]

    record = _render_lens(lens, positions, domain, sampling, dataset_seed, False, workers)
    audit = {(lens_id, sid): pos for sid, pos in enumerate(positions)}

    logger.info("Built target dataset: %d random captures", n_random)
    return Dataset(
        role="target_unlabeled",
        domain=domain,
        lenses=[record],
        sampling=sampling,
        dataset_seed=dataset_seed,
        generation={"n_random": n_random},
        audit_labels=audit,
    )


def build_oracle_dataset(domain, lens_ids, sampling, dataset_seed, step_multiplier=1, workers=None):
    """Labeled target-domain lenses, densely or (multiplier > 1) sparsely sampled"""
    if step_multiplier != 1:
        sampling = dataclasses.replace(sampling, step_um=sampling.step_um * step_multiplier)
    positions = grid_positions(sampling.range_um, sampling.step_um)
    records = []
    for lens_id in lens_ids:
        lens = draw_lens(lens_id, lens_seed(dataset_seed, lens_id), sampling.tolerance)
        records.append(_render_lens(lens, positions, domain, sampling, dataset_seed, True, workers))
    return Dataset(
        role="oracle",
        domain=domain,
        lenses=records,
        sampling=sampling,
        dataset_seed=dataset_seed,
        generation={"step_multiplier": step_multiplier},
    )


def build_eval_datasets(domain, n_test, n_oracle, sampling, dataset_seed, workers=None):
    """Disjoint test and oracle lens sets in the target domain"""
    if n_test < 1 or n_oracle < 0:
        raise InvalidInputError("need n_test >= 1 and n_oracle >= 0")
    domain.validate()
    test_ids = [EVAL_LENS_BASE + i for i in range(n_test)]
    oracle_ids = [EVAL_LENS_BASE + n_test + j for j in range(n_oracle)]

    positions = grid_positions(sampling.range_um, sampling.step_um)
    test_records = []
    for lens_id in test_ids:
        lens = draw_lens(lens_id, lens_seed(dataset_seed, lens_id), sampling.tolerance)
        test_records.append(_render_lens(lens, positions, domain, sampling, dataset_seed, True, workers))
    test = Dataset(
        role="test",
        domain=domain,
        lenses=test_records,
        sampling=sampling,
        dataset_seed=dataset_seed,
        generation={"n_test": n_test},
    )
    oracle = build_oracle_dataset(domain, oracle_ids, sampling, dataset_seed, workers=workers)
    logger.info("Built evaluation datasets: %d test lenses, %d oracle lenses", n_test, n_oracle)
    return test, oracle


# ---------------------------------------------------------------- persistence

def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_png(path, img):
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    if not cv2.imwrite(path, arr):
        raise OSError(f"could not write {path}")


def _read_png(path):
    arr = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise MissingArtifactError(f"unreadable image {path}")
    return arr.astype(np.float32) / 255.0


def save_dataset(ds, root_path):
    """Persist a dataset; returns the manifest dict"""
    os.makedirs(root_path, exist_ok=True)
    written = []

    for rec in ds.lenses:
        lens_dir = f"lens_{rec.lens.lens_id}"
        os.makedirs(os.path.join(root_path, lens_dir, "images"), exist_ok=True)

        lens_meta = dict(rec.lens.to_dict(), origin=list(rec.origin.as_tuple()))
        dump_json(lens_meta, os.path.join(root_path, lens_dir, "lens.json"))
        written.append(f"{lens_dir}/lens.json")

        lines = []
        for sample in rec.samples:
            fov_files = []
            for i in range(NUM_FOVS):
                rel = f"{lens_dir}/images/{sample.sample_id}_fov{i}.png"
                _write_png(os.path.join(root_path, rel), sample.images[i])
                fov_files.append(f"images/{sample.sample_id}_fov{i}.png")
                written.append(rel)
            record = {"sample_id": sample.sample_id, "rng_seed": sample.rng_seed, "fov_files": fov_files}
            if ds.labeled:
                record["dx_um"] = sample.label.dx
                record["dy_um"] = sample.label.dy
            lines.append(json.dumps(record, sort_keys=True))
        with open(os.path.join(root_path, lens_dir, "samples.jsonl"), "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
        written.append(f"{lens_dir}/samples.jsonl")

    dump_json({
        "domain": ds.domain,
        "sampling": ds.sampling,
        "generation": ds.generation,
    }, os.path.join(root_path, "dataset.json"))
    written.append("dataset.json")

    if ds.audit_labels:
        os.makedirs(os.path.join(root_path, "audit"), exist_ok=True)
        sealed = [
            {"lens_id": lens_id, "sample_id": sid, "dx_um": pos.dx, "dy_um": pos.dy}
            for (lens_id, sid), pos in sorted(ds.audit_labels.items())
        ]
        dump_json({"sealed": True, "labels": sealed}, os.path.join(root_path, "audit", "labels.sealed.json"))
        written.append("audit/labels.sealed.json")

    dump_json({rel: _sha256(os.path.join(root_path, rel)) for rel in sorted(written)},
              os.path.join(root_path, "checksums.json"))

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "role": ds.role,
        "dataset_seed": ds.dataset_seed,
        "config_hash": ds.config_hash,
        "lens_ids": ds.lens_ids,
    }
    dump_json(manifest, os.path.join(root_path, "manifest.json"))
    logger.info("Saved %s dataset (%d samples) to %s", ds.role, ds.n_samples, root_path)
    return manifest


def read_manifest(root_path):
    path = os.path.join(root_path, "manifest.json")
    if not os.path.exists(path):
        raise MissingArtifactError(f"missing manifest {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise DatasetSchemaError(f"corrupt manifest {path}: {e}") from e
    if not isinstance(manifest, dict):
        raise DatasetSchemaError(f"manifest {path} is not an object")
    missing = {"schema_version", "role", "dataset_seed", "config_hash", "lens_ids"} - set(manifest)
    if missing:
        raise DatasetSchemaError(f"manifest {path} lacks {sorted(missing)}")
    if manifest["schema_version"] != SCHEMA_VERSION:
        raise DatasetSchemaError(
            f"schema_version {manifest['schema_version']} in {path}, expected {SCHEMA_VERSION}"
        )
    return manifest


def _read_json(path):
    if not os.path.exists(path):
        raise MissingArtifactError(f"missing file {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise DatasetSchemaError(f"corrupt JSON in {path}: {e}") from e


def verify_checksums(root_path):
    checksums = _read_json(os.path.join(root_path, "checksums.json"))
    for rel, expected in checksums.items():
        path = os.path.join(root_path, rel)
        if not os.path.exists(path):
            raise MissingArtifactError(f"missing file {path}")
        if _sha256(path) != expected:
            raise ChecksumMismatchError(f"checksum mismatch for {path}")


def _read_lens(path):
    meta = _read_json(path)
    try:
        return LensInstance.from_dict(meta), MisalignmentOffset(*map(float, meta["origin"]))
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetSchemaError(f"bad lens record in {path}: {e!r}") from e


def _parse_sample_line(line, path, lineno, labeled):
    """One samples.jsonl record, with its label parsed only for labeled roles"""
    try:
        rec = json.loads(line)
        parsed = {
            "sample_id": int(rec["sample_id"]),
            "rng_seed": int(rec["rng_seed"]),
            "fov_files": [str(rel) for rel in rec["fov_files"]],
            "label": MisalignmentOffset(float(rec["dx_um"]), float(rec["dy_um"])) if labeled else None,
        }
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise DatasetSchemaError(f"bad sample record at {path}:{lineno}: {e!r}") from e
    if len(parsed["fov_files"]) != NUM_FOVS:
        raise DatasetSchemaError(f"bad sample record at {path}:{lineno}: expected {NUM_FOVS} field files")
    return parsed


def load_dataset(root_path, verify=True):
    manifest = read_manifest(root_path)
    if verify:
        verify_checksums(root_path)

    meta = _read_json(os.path.join(root_path, "dataset.json"))
    try:
        domain = from_jsonable(DomainConfig, meta["domain"])
        sampling = from_jsonable(SamplingConfig, meta["sampling"])
        generation = meta["generation"]
    except (KeyError, ValueError) as e:
        raise DatasetSchemaError(f"bad dataset.json in {root_path}: {e}") from e

    role = manifest["role"]
    labeled = role != "target_unlabeled"
    records = []
    for lens_id in manifest["lens_ids"]:
        lens_dir = os.path.join(root_path, f"lens_{lens_id}")
        lens, origin = _read_lens(os.path.join(lens_dir, "lens.json"))

        samples_path = os.path.join(lens_dir, "samples.jsonl")
        if not os.path.exists(samples_path):
            raise MissingArtifactError(f"missing file {samples_path}")
        samples = []
        with open(samples_path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                rec = _parse_sample_line(line, samples_path, lineno, labeled)
                images = np.stack([_read_png(os.path.join(lens_dir, rel)) for rel in rec["fov_files"]])
                samples.append(Sample(rec["sample_id"], rec["label"], images, rec["rng_seed"]))
        records.append(LensRecord(lens=lens, samples=samples, origin=origin))

    return Dataset(
        role=role,
        domain=domain,
        lenses=records,
        sampling=sampling,
        dataset_seed=manifest["dataset_seed"],
        generation=generation,
        config_hash=manifest["config_hash"],
    )
