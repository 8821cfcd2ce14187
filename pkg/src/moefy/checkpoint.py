"""Checkpoint serialization: JSON manifest + one little-endian float32 blob.

Layout: magic "LTE1", 8-byte little-endian manifest length, canonical JSON
manifest (tensor table with name/shape/offset/nbytes/precision, the model
config, partitions, stage tag, metadata), then the raw blob. Canonical JSON
plus a fixed tensor order make identical states serialize byte-identically.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .grouping import ExpertPartition
from .model import ModelConfig, TransformerParams
from .routing import RouterLayer
from .autograd import param

MAGIC = b"LTE1"


@dataclass
class CheckpointBundle:
    config: ModelConfig
    params: TransformerParams
    partitions: Optional[list[ExpertPartition]] = None
    routers: Optional[list[RouterLayer]] = None
    stage: str = "base"  # base | moefied | stage1 | stage2
    meta: dict = field(default_factory=dict)

    def ffn_partition(self, i: int) -> Optional[ExpertPartition]:
        return None if self.partitions is None else self.partitions[i]


def _partition_to_json(p: ExpertPartition) -> dict:
    return {
        "layer_index": p.layer_index,
        "n_experts": p.n_experts,
        "expert_size": p.expert_size,
        "assignment": p.assignment.tolist(),
        "permutation": p.permutation.tolist(),
        "method": p.method,
    }


def _partition_from_json(d: dict) -> ExpertPartition:
    return ExpertPartition(
        layer_index=d["layer_index"],
        n_experts=d["n_experts"],
        expert_size=d["expert_size"],
        assignment=np.asarray(d["assignment"], dtype=np.int64),
        permutation=np.asarray(d["permutation"], dtype=np.int64),
        method=d["method"],
    ).validate()


def save_checkpoint(path: str, bundle: CheckpointBundle) -> None:
    tensors: list[tuple[str, np.ndarray]] = [
        (name, bundle.params[name].data) for name in bundle.params.names()
    ]
    if bundle.routers is not None:
        for i, r in enumerate(bundle.routers):
            tensors.append((f"router.{i}.Wg", r.Wg.data))

    table = []
    offset = 0
    blobs = []
    for name, arr in tensors:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
                "precision": "f32",
            }
        )
        blobs.append(raw)
        offset += len(raw)

    manifest = {
        "config": asdict(bundle.config),
        "stage": bundle.stage,
        "partitions": None
        if bundle.partitions is None
        else [_partition_to_json(p) for p in bundle.partitions],
        "tensors": table,
        "meta": bundle.meta,
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(mbytes)))
        fh.write(mbytes)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str) -> CheckpointBundle:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        (mlen,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(mlen).decode())
        blob = fh.read()

    cfg = ModelConfig(**manifest["config"]).validate()
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        a, b = entry["offset"], entry["offset"] + entry["nbytes"]
        arr = np.frombuffer(blob[a:b], dtype="<f4").reshape(entry["shape"]).copy()
        tensors[entry["name"]] = arr

    router_names = sorted(
        (n for n in tensors if n.startswith("router.")),
        key=lambda n: int(n.split(".")[1]),
    )
    routers = None
    if router_names:
        routers = [RouterLayer(Wg=param(tensors.pop(n))) for n in router_names]

    params = TransformerParams(cfg, {n: param(a) for n, a in tensors.items()})
    partitions = None
    if manifest["partitions"] is not None:
        partitions = [_partition_from_json(d) for d in manifest["partitions"]]
    return CheckpointBundle(
        config=cfg,
        params=params,
        partitions=partitions,
        routers=routers,
        stage=manifest["stage"],
        meta=manifest.get("meta", {}),
    )
