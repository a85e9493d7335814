"""File formats and dataset bookkeeping.

Images are raw little-endian float32 with a JSON sidecar giving extents and
pixel spacing; 8/16-bit binary PGM is also accepted on ingest.  A dataset
manifest is a JSON file listing samples (image path, view, sequence, patient,
spacing, landmark slots in original pixel coordinates).
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, IngestError
from .heatmap import VIEWS, LandmarkSet
from .preprocess import Image

MANIFEST_SCHEMA_VERSION = 1


def write_image(path, image):
    """Write raw float32 pixels plus a `.json` sidecar next to `path`."""
    px = np.ascontiguousarray(image.pixels, dtype="<f4")
    with open(path, "wb") as f:
        f.write(px.tobytes())
    h, w = image.pixels.shape
    sidecar = {"height": h, "width": w, "spacing_mm": list(image.spacing_mm)}
    with open(_sidecar_path(path), "w") as f:
        json.dump(sidecar, f, sort_keys=True)
        f.write("\n")


def read_image(path):
    """Read an image file: `.pgm` is parsed as PGM, anything else as raw f32."""
    if str(path).lower().endswith(".pgm"):
        return _read_pgm(path)
    side = _sidecar_path(path)
    try:
        with open(side) as f:
            meta = json.load(f)
        h, w = int(meta["height"]), int(meta["width"])
        spacing = tuple(meta["spacing_mm"])
    except FileNotFoundError:
        raise IngestError(f"missing image sidecar {side}")
    except (ValueError, KeyError, TypeError) as exc:
        raise IngestError(f"bad image sidecar {side}: {exc}") from exc
    data = np.fromfile(path, dtype="<f4")
    if data.size != h * w:
        raise IngestError(
            f"{path}: {data.size} values but sidecar says {h}x{w}"
        )
    return Image(data.reshape(h, w).astype(np.float32), spacing)


def _sidecar_path(path):
    base, _ext = os.path.splitext(str(path))
    return base + ".json"


def _read_pgm(path):
    with open(path, "rb") as f:
        blob = f.read()
    tokens = []
    i = 0
    while len(tokens) < 4 and i < len(blob):
        if blob[i : i + 1] == b"#":  # comment to end of line
            while i < len(blob) and blob[i : i + 1] != b"\n":
                i += 1
            continue
        if blob[i : i + 1].isspace():
            i += 1
            continue
        j = i
        while j < len(blob) and not blob[j : j + 1].isspace():
            j += 1
        tokens.append(blob[i:j])
        i = j
    if len(tokens) != 4 or tokens[0] not in (b"P5", b"P2"):
        raise IngestError(f"{path}: not an 8/16-bit PGM file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if tokens[0] == b"P2":
        vals = np.array(blob[i:].split(), dtype=np.float32)
        if vals.size != h * w:
            raise IngestError(f"{path}: expected {h * w} samples, got {vals.size}")
        px = vals.reshape(h, w)
    else:
        i += 1  # single whitespace byte after maxval
        dtype = ">u2" if maxval > 255 else "u1"
        px = np.frombuffer(blob, dtype=dtype, count=h * w, offset=i)
        px = px.reshape(h, w).astype(np.float32)
    spacing = (1.0, 1.0)
    side = _sidecar_path(path)
    if os.path.exists(side):
        with open(side) as f:
            meta = json.load(f)
        spacing = tuple(meta.get("spacing_mm", spacing))
    return Image(px, spacing)


@dataclass
class Sample:
    """One manifest entry; landmark coordinates are original-frame pixels."""

    image: str
    view: str
    sequence: str
    patient: str
    spacing_mm: tuple
    landmarks: dict  # slot -> (x, y) or None

    def __post_init__(self):
        if self.view not in VIEWS:
            raise ConfigError(f"unknown view {self.view!r}")
        if not self.patient:
            raise ConfigError(f"sample {self.image}: patient id must be nonempty")
        slots = VIEWS[self.view]
        if tuple(self.landmarks.keys()) != slots:
            raise ConfigError(
                f"sample {self.image}: slots {tuple(self.landmarks)} do not match "
                f"view {self.view} schema {slots}"
            )

    def landmark_set(self, frame):
        pts = {
            s: (None if p is None else (float(p[0]), float(p[1])))
            for s, p in self.landmarks.items()
        }
        return LandmarkSet(self.view, pts, tuple(frame), tuple(self.spacing_mm))


@dataclass
class Manifest:
    samples: list
    root: str = "."
    schema_version: int = MANIFEST_SCHEMA_VERSION

    def image_path(self, sample):
        return os.path.join(self.root, sample.image)

    def load_image(self, sample):
        return read_image(self.image_path(sample))

    def patients(self):
        seen = {}
        for s in self.samples:
            seen.setdefault(s.patient, None)
        return list(seen)


def save_manifest(manifest, path):
    doc = {
        "schema_version": manifest.schema_version,
        "samples": [
            {
                "image": s.image,
                "view": s.view,
                "sequence": s.sequence,
                "patient": s.patient,
                "spacing_mm": list(s.spacing_mm),
                "landmarks": {
                    slot: (None if p is None else {"x": p[0], "y": p[1]})
                    for slot, p in s.landmarks.items()
                },
            }
            for s in manifest.samples
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def load_manifest(path):
    with open(path) as f:
        doc = json.load(f)
    if doc.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise IngestError(
            f"{path}: manifest schema {doc.get('schema_version')!r}, "
            f"expected {MANIFEST_SCHEMA_VERSION}"
        )
    samples = []
    for d in doc["samples"]:
        view = d["view"]
        lm = {}
        for slot in VIEWS[view]:
            p = d["landmarks"].get(slot)
            lm[slot] = None if p is None else (float(p["x"]), float(p["y"]))
        samples.append(
            Sample(
                image=d["image"],
                view=view,
                sequence=d["sequence"],
                patient=d["patient"],
                spacing_mm=tuple(d["spacing_mm"]),
                landmarks=lm,
            )
        )
    return Manifest(samples=samples, root=os.path.dirname(os.path.abspath(path)))


def ingest_via(via_json_path, view, image_dir, sequence="cine", patient_from_name=None):
    """Build manifest samples from a VIA point-annotation project export.

    Each point region's "label" attribute must be one of the landmark slot
    names; images with zero regions become empty-landmark entries.  The
    default patient id is the image stem up to the first underscore.
    """
    if view not in VIEWS:
        raise ConfigError(f"unknown view {view!r}")
    slots = VIEWS[view]
    with open(via_json_path) as f:
        doc = json.load(f)
    metadata = doc.get("_via_img_metadata", doc)
    samples = []
    for _key, entry in sorted(metadata.items()):
        fname = entry["filename"]
        regions = entry.get("regions", [])
        if isinstance(regions, dict):
            regions = [regions[k] for k in sorted(regions)]
        points = {s: None for s in slots}
        for region in regions:
            shape = region.get("shape_attributes", {})
            if shape.get("name") != "point":
                raise IngestError(
                    f"{fname}: region shape {shape.get('name')!r} is not a point"
                )
            label = region.get("region_attributes", {}).get("label")
            if label not in slots:
                raise IngestError(
                    f"{fname}: unknown label {label!r}; valid labels for "
                    f"{view}: {list(slots)}"
                )
            if points[label] is not None:
                raise IngestError(f"{fname}: duplicate label {label!r}")
            points[label] = (float(shape["cx"]), float(shape["cy"]))
        img_path = os.path.join(image_dir, fname)
        img = read_image(img_path)
        if patient_from_name is None:
            patient = os.path.splitext(fname)[0].split("_")[0]
        else:
            patient = patient_from_name(fname)
        samples.append(
            Sample(
                image=os.path.relpath(img_path, image_dir),
                view=view,
                sequence=sequence,
                patient=patient,
                spacing_mm=img.spacing_mm,
                landmarks=points,
            )
        )
    return samples
