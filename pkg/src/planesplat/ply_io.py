"""Minimal PLY reader/writer for the checkpoint, mesh, and point formats used here.

Handles binary_little_endian and ascii, float/double/uchar/int scalar
properties, and triangle face lists.  This is not a general PLY library;
it covers the files this package writes plus plain xyz/rgb point clouds.
"""

import struct

import numpy as np

_TYPES = {
    "float": ("<f4", 4), "float32": ("<f4", 4),
    "double": ("<f8", 8), "float64": ("<f8", 8),
    "uchar": ("<u1", 1), "uint8": ("<u1", 1),
    "char": ("<i1", 1), "int8": ("<i1", 1),
    "short": ("<i2", 2), "ushort": ("<u2", 2),
    "int": ("<i4", 4), "int32": ("<i4", 4),
    "uint": ("<u4", 4), "uint32": ("<u4", 4),
}


def write_ply(path, elements, binary=True):
    """Write a PLY file.

    ``elements`` is a list of (name, columns) where columns is an ordered
    dict property_name -> 1-D array, or for face elements the special key
    "vertex_indices" -> (F, 3) int array.
    """
    header = ["ply"]
    header.append("format binary_little_endian 1.0" if binary else "format ascii 1.0")
    for name, cols in elements:
        n = len(next(iter(cols.values())))
        header.append(f"element {name} {n}")
        for pname, arr in cols.items():
            if pname == "vertex_indices":
                header.append("property list uchar int vertex_indices")
            else:
                arr = np.asarray(arr)
                if arr.dtype == np.float64:
                    t = "double"
                elif arr.dtype == np.uint8:
                    t = "uchar"
                elif np.issubdtype(arr.dtype, np.integer):
                    t = "int"
                else:
                    t = "float"
                header.append(f"property {t} {pname}")
    header.append("end_header")

    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        for name, cols in elements:
            n = len(next(iter(cols.values())))
            if "vertex_indices" in cols:
                faces = np.asarray(cols["vertex_indices"], dtype=np.int32)
                if binary:
                    rec = np.empty(n, dtype=[("c", "u1"), ("v", "<i4", (3,))])
                    rec["c"] = 3
                    rec["v"] = faces
                    f.write(rec.tobytes())
                else:
                    for row in faces:
                        f.write(f"3 {row[0]} {row[1]} {row[2]}\n".encode("ascii"))
            else:
                names = list(cols)
                arrs = []
                fields = []
                for pname in names:
                    arr = np.asarray(cols[pname])
                    if arr.dtype == np.float64:
                        dt = "<f8"
                    elif arr.dtype == np.uint8:
                        dt = "<u1"
                    elif np.issubdtype(arr.dtype, np.integer):
                        dt = "<i4"
                        arr = arr.astype(np.int32)
                    else:
                        dt = "<f4"
                        arr = arr.astype(np.float32)
                    arrs.append(arr)
                    fields.append((pname, dt))
                if binary:
                    rec = np.empty(n, dtype=fields)
                    for pname, arr in zip(names, arrs):
                        rec[pname] = arr
                    f.write(rec.tobytes())
                else:
                    for i in range(n):
                        f.write((" ".join(repr(float(a[i])) if a.dtype.kind == "f"
                                          else str(int(a[i])) for a in arrs)
                                 + "\n").encode("ascii"))


def read_ply(path):
    """Read a PLY file into {element_name: {property_name: array}}.

    Face list properties are returned as an (F, 3) int array under
    "vertex_indices" (only triangle lists are supported).
    """
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"end_header")
    if end < 0:
        raise ValueError(f"{path}: not a PLY file (no end_header)")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    body = data[end:]
    body = body[body.find(b"\n") + 1:]

    if not header or header[0].strip() != "ply":
        raise ValueError(f"{path}: missing ply magic")
    fmt = None
    elements = []  # (name, count, [(prop, type) or ("vertex_indices", "list")])
    for line in header[1:]:
        parts = line.strip().split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if parts[1] == "list":
                elements[-1][2].append((parts[4], "list", parts[2], parts[3]))
            else:
                elements[-1][2].append((parts[2], parts[1]))
    if fmt not in ("binary_little_endian", "ascii"):
        raise ValueError(f"{path}: unsupported PLY format {fmt}")

    out = {}
    offset = 0
    if fmt == "ascii":
        lines = body.split(b"\n")
        li = 0
        for name, count, props in elements:
            cols = {p[0]: [] for p in props}
            for _ in range(count):
                toks = lines[li].split()
                li += 1
                ti = 0
                for p in props:
                    if len(p) > 2 and p[1] == "list":
                        n = int(toks[ti])
                        vals = [int(t) for t in toks[ti + 1:ti + 1 + n]]
                        ti += 1 + n
                        if n != 3:
                            raise ValueError(f"{path}: only triangle faces supported")
                        cols[p[0]].append(vals)
                    else:
                        cols[p[0]].append(float(toks[ti]))
                        ti += 1
            out[name] = {k: np.asarray(v) for k, v in cols.items()}
        return out

    for name, count, props in elements:
        if any(len(p) > 2 and p[1] == "list" for p in props):
            if len(props) != 1:
                raise ValueError(f"{path}: mixed list/scalar elements unsupported")
        if props and len(props[0]) > 2 and props[0][1] == "list":
            cdt, cw = _TYPES[props[0][2]]
            idt, iw = _TYPES[props[0][3]]
            faces = np.empty((count, 3), dtype=np.int64)
            for i in range(count):
                (n,) = np.frombuffer(body, dtype=cdt, count=1, offset=offset)
                offset += cw
                if int(n) != 3:
                    raise ValueError(f"{path}: only triangle faces supported")
                faces[i] = np.frombuffer(body, dtype=idt, count=3, offset=offset)
                offset += 3 * iw
            out[name] = {"vertex_indices": faces}
        else:
            fields = []
            for pname, ptype in props:
                dt, _ = _TYPES[ptype]
                fields.append((pname, dt))
            rec = np.frombuffer(body, dtype=fields, count=count, offset=offset)
            offset += rec.itemsize * count
            out[name] = {pname: np.array(rec[pname]) for pname, _ in props}
    return out
