"""Writer for the ANOC named-tensor archive format.

Layout: magic "ANOC", version u32, descriptor-length u32, descriptor JSON,
tensor count u32, then per tensor: name length u16, UTF-8 name, rank u8,
dims u32 each, row-major float32 data. All integers and floats little-endian.
"""

import json
import struct


def write_archive(path, descriptor, tensors):
    """tensors: iterable of (name, numpy float32 array)."""
    tensors = list(tensors)
    with open(path, "wb") as f:
        f.write(b"ANOC")
        f.write(struct.pack("<I", 1))
        desc = json.dumps(descriptor).encode("utf-8")
        f.write(struct.pack("<I", len(desc)))
        f.write(desc)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            data = arr.astype("<f4")
            name_b = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<B", data.ndim))
            for d in data.shape:
                f.write(struct.pack("<I", d))
            f.write(data.tobytes(order="C"))


def module_tensors(model):
    """Named parameters and buffers of a torch module, as numpy arrays."""
    out = []
    for name, p in model.named_parameters():
        out.append((name, p.detach().cpu().numpy()))
    for name, b in model.named_buffers():
        if name.endswith("num_batches_tracked"):
            continue
        out.append((name, b.detach().cpu().numpy()))
    return out
