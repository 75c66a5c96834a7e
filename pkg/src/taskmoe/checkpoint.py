"""Deterministic checkpoint archives.

A checkpoint is a zip (stored, fixed timestamps) with ``config.json``,
``tensors.bin``, ``rng.json`` and ``tasks.json``.  ``tensors.bin`` is a
sequence of records: name length (uint32), utf-8 name, ndim (uint32), dims
(uint32 each) and float64 little-endian data.
"""
from __future__ import annotations

import io
import json
import struct
import zipfile
from dataclasses import dataclass, field

import numpy as np

from .corpus import TaskDataset, Vocab
from .routing import RouterNetwork, Routing, TaskEmbeddingTable, TemperatureSchedule
from .training import BaselineRouter, MoEModel
from .transformer import ExpertGrid, ModelConfig

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


def pack_tensors(tensors):
    buf = io.BytesIO()
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8", order="C")
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def unpack_tensors(data):
    out, pos = {}, 0
    try:
        while pos < len(data):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            count = int(np.prod(shape))
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape)
            pos += 8 * count
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"corrupt tensor blob: {e}") from e
    return out


def _write(zf, name, payload):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


@dataclass
class Checkpoint:
    model: MoEModel
    config: dict
    tensors: dict
    tasks: list = field(default_factory=list)
    rng: dict = field(default_factory=dict)


def model_config(model):
    cfg = {"format": FORMAT_VERSION, "model": model.config.to_dict(),
           "vocab": model.vocab.itos, "task_names": model.task_names}
    if model.routing is not None:
        r = model.routing
        cfg["routing"] = {"variant": r.router.variant, "d": r.router.d,
                          "selection": r.selection, "eval_tau": r.eval_tau,
                          "schedule": [r.schedule.tau0, r.schedule.tau_end, r.schedule.total_steps],
                          "frozen": r.table.frozen.tolist()}
    else:
        cfg["baseline"] = {"mode": model.baseline.mode}
    return cfg


def save_checkpoint(path, model, extra_config=None, extra_tensors=None, tasks=(), rng=None):
    config = {**model_config(model), **(extra_config or {})}
    tensors = dict(model.state_dict())
    for k, v in (extra_tensors or {}).items():
        if k in tensors:
            raise CheckpointError(f"tensor name clash: {k}")
        tensors[k] = v
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        _write(zf, "config.json", json.dumps(config, sort_keys=True, indent=1))
        _write(zf, "tensors.bin", pack_tensors(tensors))
        _write(zf, "rng.json", json.dumps(rng or {}, sort_keys=True))
        _write(zf, "tasks.json", json.dumps([t.to_dict() for t in tasks], sort_keys=True))
    return path


def _rebuild(config, tensors):
    mc = ModelConfig.from_dict(config["model"])
    n, m = mc.n_layers, mc.n_experts
    # placeholder params; every value is overwritten by load_state_dict
    grid = ExpertGrid.random(mc, np.random.default_rng(0))
    vocab = Vocab(config["vocab"])
    if vocab.itos != config["vocab"]:
        raise CheckpointError("vocabulary does not round-trip")
    names = config["task_names"]
    if "routing" in config:
        rc = config["routing"]
        table = TaskEmbeddingTable(tensors["table"], rc["frozen"], names)
        router = RouterNetwork(rc["variant"], rc["d"], n, m, np.random.default_rng(0))
        routing = Routing(table, router, rc["selection"], TemperatureSchedule(*rc["schedule"]),
                          rc["eval_tau"])
        model = MoEModel(grid, vocab, names, routing=routing)
    else:
        base = BaselineRouter(config["baseline"]["mode"], n, m, [], np.random.default_rng(0))
        model = MoEModel(grid, vocab, names, baseline=base)
    model.load_state_dict(tensors)
    return model


def load_checkpoint(path):
    try:
        with zipfile.ZipFile(path) as zf:
            config = json.loads(zf.read("config.json"))
            tensors = unpack_tensors(zf.read("tensors.bin"))
            rng = json.loads(zf.read("rng.json"))
            tasks = [TaskDataset.from_dict(d) for d in json.loads(zf.read("tasks.json"))]
    except (zipfile.BadZipFile, KeyError) as e:
        raise CheckpointError(f"{path}: not a checkpoint ({e})") from e
    if config.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format {config.get('format')}")
    return Checkpoint(_rebuild(config, tensors), config, tensors, tasks, rng)


def grid_from_tensors(tensors, prefix, config):
    """Rebuild an auxiliary grid (e.g. the pretrained base) stored under ``prefix``."""
    grid = ExpertGrid.random(ModelConfig.from_dict(config), np.random.default_rng(0))
    grid.load_state_dict({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
    return grid
