"""File formats shared by the command-line stages.

Matrices are tab-separated with a header row; floats are written in
shortest round-trip form so reruns are byte-identical and reads are exact.
Every stage writes a JSON manifest holding SHA-256 hashes of its inputs and
outputs.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataIOError
from .simcore import Dataset, InterventionDesign, WeightedGraph

DRAWS_MAGIC = b"IBCDRAW1"
MANIFEST_VERSION = 1


def _fmt(x) -> str:
    return repr(float(x))


def _open_read(path):
    path = Path(path)
    if not path.is_file():
        raise DataIOError(f"missing input file: {path}")
    return path


def _check_dir(path):
    path = Path(path)
    if not path.is_dir():
        raise DataIOError(f"output directory does not exist: {path}")
    return path


def write_matrix(path, m, names=None) -> Path:
    m = np.atleast_2d(np.asarray(m, dtype=float))
    names = names or [f"V{j}" for j in range(m.shape[1])]
    _check_dir(Path(path).parent)
    with open(path, "w", newline="\n") as fh:
        fh.write("\t".join(names) + "\n")
        for row in m:
            fh.write("\t".join(_fmt(x) for x in row) + "\n")
    return Path(path)


def read_matrix(path):
    path = _open_read(path)
    try:
        with open(path) as fh:
            header = fh.readline().rstrip("\n").split("\t")
            rows = [line.rstrip("\n").split("\t") for line in fh if line.strip()]
        m = np.array(rows, dtype=float).reshape(len(rows), len(header))
    except ValueError as exc:
        raise DataIOError(f"malformed matrix file {path}: {exc}") from exc
    return m, header


def write_dataset(directory, data: Dataset, names=None) -> dict:
    """Y.tsv (sample_id + one column per variable) and design.tsv triplets."""
    d = _check_dir(directory)
    names = names or [f"V{j}" for j in range(data.dim)]
    ids = [f"s{r}" for r in range(data.n_samples)]
    with open(d / "Y.tsv", "w", newline="\n") as fh:
        fh.write("sample_id\t" + "\t".join(names) + "\n")
        for sid, row in zip(ids, data.Y):
            fh.write(sid + "\t" + "\t".join(_fmt(x) for x in row) + "\n")
    with open(d / "design.tsv", "w", newline="\n") as fh:
        fh.write("sample_id\tintervention_id\ttarget_id\tbeta\n")
        x = data.design.assignment
        for r, c in zip(*np.nonzero(x)):
            for t in data.design.targets[c]:
                fh.write(f"{ids[r]}\t{c}\t{names[t]}\t{_fmt(data.design.beta[c, t])}\n")
    return {"Y": d / "Y.tsv", "design": d / "design.tsv"}


def read_dataset(directory) -> tuple[Dataset, list]:
    """Inverse of ``write_dataset``; samples absent from design.tsv are controls."""
    d = Path(directory)
    ypath = _open_read(d / "Y.tsv")
    dpath = _open_read(d / "design.tsv")
    with open(ypath) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if not header or header[0] != "sample_id":
            raise DataIOError(f"{ypath}: first column must be sample_id")
        ids, rows = [], []
        for line in fh:
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != len(header):
                raise DataIOError(f"{ypath}: ragged row for sample {parts[0]}")
            ids.append(parts[0])
            rows.append(parts[1:])
    names = header[1:]
    try:
        y = np.array(rows, dtype=float).reshape(len(rows), len(names))
    except ValueError as exc:
        raise DataIOError(f"{ypath}: non-numeric entry") from exc
    index = {s: k for k, s in enumerate(ids)}
    col = {n: k for k, n in enumerate(names)}
    entries = []
    with open(dpath) as fh:
        dh = fh.readline().rstrip("\n").split("\t")
        if dh[:3] != ["sample_id", "intervention_id", "target_id"]:
            raise DataIOError(f"{dpath}: expected columns sample_id, intervention_id, target_id")
        for line in fh:
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if parts[0] not in index:
                raise DataIOError(f"{dpath}: unknown sample {parts[0]}")
            if parts[2] not in col:
                raise DataIOError(f"{dpath}: unknown target {parts[2]}")
            beta = float(parts[3]) if len(parts) > 3 and parts[3] else 1.0
            entries.append((index[parts[0]], parts[1], col[parts[2]], beta))
    labels = sorted({e[1] for e in entries}, key=lambda s: (len(s), s))
    lab_index = {lab: k for k, lab in enumerate(labels)}
    x = np.zeros((len(ids), len(labels)), dtype=np.int8)
    targets = [set() for _ in labels]
    beta = np.zeros((len(labels), len(names)))
    for r, lab, t, b in entries:
        m = lab_index[lab]
        x[r, m] = 1
        targets[m].add(t)
        beta[m, t] = b
    design = InterventionDesign(x, [tuple(sorted(t)) for t in targets], beta)
    return Dataset(y, design, design.control_rows(), {"source": str(d)}), names


def write_truth(path, graph) -> Path:
    w = np.asarray(getattr(graph, "weights", graph), dtype=float)
    _check_dir(Path(path).parent)
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# dim={w.shape[0]}\n")
        fh.write("i\tj\tweight\n")
        for i, j in zip(*np.nonzero(w)):
            fh.write(f"{i}\t{j}\t{_fmt(w[i, j])}\n")
    return Path(path)


def read_truth(path, dim: int | None = None) -> WeightedGraph:
    path = _open_read(path)
    edges = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                if "dim=" in line and dim is None:
                    dim = int(line.split("dim=")[1])
                continue
            parts = line.rstrip("\n").split("\t")
            if parts[0] == "i" or not line.strip():
                continue
            edges.append((int(parts[0]), int(parts[1]), float(parts[2])))
    if dim is None:
        raise DataIOError(f"{path}: graph dimension unknown")
    w = np.zeros((dim, dim))
    for i, j, v in edges:
        w[i, j] = v
    return WeightedGraph(w)


def write_groups(path, group_labels, control_mask) -> Path:
    """Two columns per sample: group label and control flag (1 for control rows)."""
    labels = [str(g) for g in group_labels]
    mask = np.asarray(control_mask, dtype=bool)
    if len(labels) != mask.size:
        raise ConfigError("group labels and control mask differ in length")
    _check_dir(Path(path).parent)
    with open(path, "w", newline="\n") as fh:
        fh.write("group\tcontrol\n")
        for g, c in zip(labels, mask):
            fh.write(f"{g}\t{int(c)}\n")
    return Path(path)


def read_groups(path):
    path = _open_read(path)
    labels, mask = [], []
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header != ["group", "control"]:
            raise DataIOError(f"{path}: expected columns group, control")
        for line in fh:
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2 or parts[1] not in ("0", "1"):
                raise DataIOError(f"{path}: malformed row {line.strip()!r}")
            labels.append(parts[0])
            mask.append(parts[1] == "1")
    return np.array(labels, dtype=object), np.array(mask, dtype=bool)


def write_summary(directory, summary) -> dict:
    d = _check_dir(directory)
    out = {}
    for name in ("r_hat", "se", "u", "v"):
        out[name] = write_matrix(d / f"{name}.tsv", getattr(summary, name))
    with open(d / "summary.json", "w") as fh:
        json.dump({"n_obs": int(summary.n_obs), "options": summary.options}, fh, indent=2, sort_keys=True)
    out["summary"] = d / "summary.json"
    return out


def read_summary(directory):
    from .tce import TceSummary

    d = Path(directory)
    mats = {name: read_matrix(d / f"{name}.tsv")[0] for name in ("r_hat", "se", "u", "v")}
    with open(_open_read(d / "summary.json")) as fh:
        meta = json.load(fh)
    return TceSummary(mats["r_hat"], mats["se"], mats["u"], mats["v"], meta["n_obs"], meta.get("options", {}))


def write_prior(directory, prior) -> dict:
    d = _check_dir(directory)
    out = {"pi0": write_matrix(d / "pi0.tsv", prior.pi0)}
    meta = {"tau": prior.tau, "sigma0_sq": prior.sigma0_sq, "info": prior.info}
    with open(d / "prior.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    out["prior"] = d / "prior.json"
    return out


def read_prior(directory):
    from .priorfit import EdgePriorField

    d = Path(directory)
    pi0 = read_matrix(d / "pi0.tsv")[0]
    with open(_open_read(d / "prior.json")) as fh:
        meta = json.load(fh)
    return EdgePriorField(pi0, meta["tau"], meta["sigma0_sq"], meta.get("info", {}))


def write_draws(path, draws) -> Path:
    """Header: magic, then int64 D, n_chains, n_samples, seed; body float64 chain-major."""
    if draws.dim is None:
        raise ConfigError("only graph draws can be written")
    body = np.ascontiguousarray(draws.graph_draws(), dtype="<f8")
    _check_dir(Path(path).parent)
    with open(path, "wb") as fh:
        fh.write(DRAWS_MAGIC)
        fh.write(struct.pack("<4q", draws.dim, draws.n_chains, draws.n_samples, int(draws.seed)))
        fh.write(body.tobytes())
    return Path(path)


def read_draws(path):
    """Returns (graph_draws[chain, draw, edge], dim, seed)."""
    path = _open_read(path)
    raw = path.read_bytes()
    if raw[:8] != DRAWS_MAGIC:
        raise DataIOError(f"{path}: not a draws file")
    dim, chains, samples, seed = struct.unpack("<4q", raw[8:40])
    n = dim * (dim - 1)
    body = np.frombuffer(raw[40:], dtype="<f8")
    if body.size != chains * samples * n:
        raise DataIOError(f"{path}: truncated draws body")
    return body.reshape(chains, samples, n).copy(), dim, seed


def graphs_from_vectors(vectors, dim) -> np.ndarray:
    flat = np.asarray(vectors).reshape(-1, dim * (dim - 1))
    out = np.zeros((flat.shape[0], dim, dim))
    rows, cols = np.nonzero(~np.eye(dim, dtype=bool))
    out[:, rows, cols] = flat
    return out


def write_json(path, obj) -> Path:
    _check_dir(Path(path).parent)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
    return Path(path)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def format_cell(x) -> str:
    return _fmt(x) if isinstance(x, (float, np.floating)) else str(x)


def write_table(path, header, rows) -> Path:
    _check_dir(Path(path).parent)
    with open(path, "w", newline="\n") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(format_cell(x) for x in row) + "\n")
    return Path(path)


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(directory, stage: str, config: dict, inputs: dict, outputs: dict, seed=None) -> Path:
    d = _check_dir(directory)
    manifest = {
        "version": MANIFEST_VERSION,
        "stage": stage,
        "seed": seed,
        "config": config,
        "config_sha256": hashlib.sha256(
            json.dumps(config, sort_keys=True, default=_json_default).encode()
        ).hexdigest(),
        "inputs": {k: {"path": str(p), "sha256": sha256(p)} for k, p in sorted(inputs.items())},
        "outputs": {k: {"path": str(p), "sha256": sha256(p)} for k, p in sorted(outputs.items())},
    }
    path = d / f"manifest.{stage}.json"
    return write_json(path, manifest)


def verify_manifest(path) -> list[str]:
    """Paths whose current hash differs from the manifest (missing files included)."""
    with open(_open_read(path)) as fh:
        manifest = json.load(fh)
    bad = []
    for group in ("inputs", "outputs"):
        for rec in manifest.get(group, {}).values():
            p = Path(rec["path"])
            if not p.is_file() or sha256(p) != rec["sha256"]:
                bad.append(str(p))
    return bad
