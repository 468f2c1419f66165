"""Named-tensor checkpoint archive.

Layout: an 8-byte magic, a little-endian uint64 header length, a JSON
header (format version, model config, category space, split spec, training
state, and a tensor manifest of name/shape/offset), then the raw float64
little-endian buffers back to back. Offsets are relative to the data
section start.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import fusion as fusion_mod
from .detector import Detector, ModelConfig
from .errors import CheckpointMismatch, SchemaVersionMismatch
from .scenes import SplitSpec
from .textspace import CategorySpace

MAGIC = b"TOVDCKPT"
FORMAT_VERSION = 1


def _space_to_dict(space: CategorySpace) -> dict:
    return {
        "shapes": list(space.shapes),
        "colors": list(space.colors),
        "d_text": space.d_text,
        "seed": space.seed,
        "shape_prototypes": {k: v.tolist() for k, v in space.shape_prototypes.items()},
        "color_prototypes": {k: v.tolist() for k, v in space.color_prototypes.items()},
    }


def _space_from_dict(d: dict) -> CategorySpace:
    shape_p = {k: np.asarray(v, dtype=np.float64) for k, v in d["shape_prototypes"].items()}
    color_p = {k: np.asarray(v, dtype=np.float64) for k, v in d["color_prototypes"].items()}
    for v in list(shape_p.values()) + list(color_p.values()):
        v.setflags(write=False)
    return CategorySpace(
        shapes=tuple(d["shapes"]),
        colors=tuple(d["colors"]),
        d_text=d["d_text"],
        seed=d["seed"],
        shape_prototypes=shape_p,
        color_prototypes=color_p,
    )


@dataclass
class CheckpointData:
    config: ModelConfig
    with_fusion: bool
    space: CategorySpace
    split: SplitSpec
    tensors: dict[str, np.ndarray]
    train_state: dict | None

    def build_model(self) -> Detector:
        model = Detector(self.config, with_fusion=self.with_fusion)
        load_params(model, self.tensors, allow_extra=True)
        return model

    def model_tensors(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith("opt.")}


def save_checkpoint(
    path: str,
    model: Detector,
    space: CategorySpace,
    split: SplitSpec,
    train_state: dict | None = None,
    extra_tensors: dict[str, np.ndarray] | None = None,
) -> None:
    """Write the model plus bookkeeping; ``extra_tensors`` carries optimizer moments."""
    tensors: list[tuple[str, np.ndarray]] = [(n, t.data) for n, t in model.store.items()]
    for name, arr in (extra_tensors or {}).items():
        tensors.append((name, np.asarray(arr, dtype=np.float64)))
    manifest = []
    offset = 0
    for name, arr in tensors:
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "format_version": FORMAT_VERSION,
        "config": asdict(model.config),
        "with_fusion": model.with_fusion,
        "category_space": _space_to_dict(space),
        "split": split.to_dict(),
        "train_state": train_state,
        "tensors": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, arr in tensors:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> CheckpointData:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(MAGIC)] != MAGIC:
        raise SchemaVersionMismatch(f"{path}: bad magic, not a checkpoint")
    (hlen,) = struct.unpack("<Q", raw[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise SchemaVersionMismatch(f"{path}: unreadable header: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise SchemaVersionMismatch(f"{path}: format version {header.get('format_version')}")
    data = raw[start + hlen :]
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        off = entry["offset"]
        buf = data[off : off + n * 8]
        if len(buf) != n * 8:
            raise SchemaVersionMismatch(f"{path}: truncated tensor {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return CheckpointData(
        config=ModelConfig(**header["config"]),
        with_fusion=header["with_fusion"],
        space=_space_from_dict(header["category_space"]),
        split=SplitSpec.from_dict(header["split"]),
        tensors=tensors,
        train_state=header["train_state"],
    )


def load_params(model: Detector, tensors: dict[str, np.ndarray], allow_extra: bool = False) -> None:
    """Copy named arrays into the model; every model tensor must be present."""
    for name, param in model.store.items():
        if name not in tensors:
            raise CheckpointMismatch(f"checkpoint is missing tensor {name!r}")
        arr = tensors[name]
        if arr.shape != param.data.shape:
            raise CheckpointMismatch(
                f"tensor {name!r} has shape {arr.shape}, model expects {param.data.shape}"
            )
        param.data = arr.astype(np.float64).copy()
    if not allow_extra:
        extra = [n for n in tensors if n not in model.store.params and not n.startswith("opt.")]
        if extra:
            raise CheckpointMismatch(f"checkpoint has unexpected tensors: {extra[:5]}")


def load_stage1_into_stage2(model: Detector, ck: CheckpointData) -> None:
    """Seed a fusion-equipped model from a stage-1 checkpoint.

    Every non-fusion tensor must load exactly; fusion tensors keep their
    fresh initialization (zero output projection).
    """
    if ck.with_fusion:
        raise CheckpointMismatch("expected a stage-1 checkpoint without fusion tensors")
    source = ck.model_tensors()
    for name, param in model.store.items():
        if name.startswith(fusion_mod.PARAM_PREFIX):
            continue
        if name not in source:
            raise CheckpointMismatch(f"stage-1 checkpoint is missing tensor {name!r}")
        arr = source[name]
        if arr.shape != param.data.shape:
            raise CheckpointMismatch(
                f"tensor {name!r} has shape {arr.shape}, model expects {param.data.shape}"
            )
        param.data = arr.astype(np.float64).copy()
