"""Binary checkpoint format.

Layout (all integers little-endian u32)::

    b"WSDC" | version | records...
    record = name_len | name (utf-8) | rank | dims[rank] | values (f64 LE)

Run metadata (config echo, epoch, seed) travels as a rank-1 record named
``__meta__`` whose values are the bytes of a UTF-8 JSON document.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"WSDC"
VERSION = 1
META = "__meta__"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict
    meta: dict = field(default_factory=dict)

    def to_bytes(self):
        parts = [MAGIC, struct.pack("<I", VERSION)]
        records = dict(self.tensors)
        if self.meta:
            blob = json.dumps(self.meta, sort_keys=True).encode("utf-8")
            records[META] = np.frombuffer(blob, dtype=np.uint8).astype(np.float64)
        for name, arr in records.items():
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)))
            parts.append(raw)
            parts.append(struct.pack("<I", arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(np.ascontiguousarray(arr).tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob):
        if blob[:4] != MAGIC:
            raise CheckpointError("not a checkpoint (bad magic)")
        (version,) = struct.unpack_from("<I", blob, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 8
        tensors = {}
        meta = {}
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * count
            if name in tensors:
                raise CheckpointError(f"tensor {name!r} appears twice")
            if name == META:
                meta = json.loads(arr.astype(np.uint8).tobytes().decode("utf-8"))
            else:
                tensors[name] = arr
        return cls(tensors, meta)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def from_model(model, **meta):
    tensors = {name: t.data.copy() for name, t in model.params.named().items()}
    info = {"config": model.config.echo(), "vocab_size": model.vocab_size, "n_answers": model.n_answers}
    info.update(meta)
    return Checkpoint(tensors, info)
