"""Training loop: Adam with decoupled weight decay, global grad-norm
clipping, seeded shuffling, CSV loss logging, and bit-exact checkpoints.

A checkpoint captures everything the numerical trajectory depends on
(parameters, Adam moments, RNG state, config hash), so an interrupted run
resumed from disk is bit-identical to an uninterrupted one.  Diagnostic
resume modes deliberately drop parts of that state to study the resulting
loss jump.
"""

from __future__ import annotations

import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .evaluation import evaluate
from .model import groundtruth_by_frame, init_model_params, predict_scene, scene_loss
from .tensor import Tape

CHECKPOINT_MAGIC = b"LBCK"
CHECKPOINT_VERSION = 1


class NonFiniteGradientError(FloatingPointError):
    pass


class TrainingDivergedError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


class ConfigHashMismatchError(CheckpointError):
    pass


# ---------------------------------------------------------------------------
# optimizer


def init_adam_state(params) -> dict:
    return {"step": 0,
            "m": {k: np.zeros_like(v) for k, v in params.items()},
            "v": {k: np.zeros_like(v) for k, v in params.items()}}


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8,
              weight_decay=0.0):
    """One in-place Adam update with bias correction and decoupled weight
    decay.  Parameters without a gradient this step are left untouched
    (their moments do not advance either)."""
    b1, b2 = betas
    state["step"] += 1
    t = state["step"]
    for name in sorted(params):
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name}")
        m = state["m"][name] = b1 * state["m"][name] + (1 - b1) * g
        v = state["v"][name] = b2 * state["v"][name] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        params[name] = params[name] - lr * (m_hat / (np.sqrt(v_hat) + eps)
                                            + weight_decay * params[name])


def clip_global_norm(grads, max_norm):
    """Scale all gradients so the global L2 norm is at most max_norm.

    The reduction runs in sorted name order so the result does not depend
    on dict insertion order (fresh init vs checkpoint load)."""
    total = np.sqrt(sum(float((grads[k] * grads[k]).sum()) for k in sorted(grads)))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


# ---------------------------------------------------------------------------
# logging


@dataclass
class TrainLog:
    """Append-only per-step records plus per-epoch wall-time summaries."""

    steps: list = field(default_factory=list)       # dict per step
    epoch_seconds: list = field(default_factory=list)
    path: str | None = None

    CSV_HEADER = "step,epoch,loss_total,loss_cls,loss_pts,loss_bnd,wall_ms"

    def record(self, step, epoch, parts, wall_ms):
        if self.steps and step <= self.steps[-1]["step"]:
            raise ValueError("steps must be strictly increasing")
        row = {"step": step, "epoch": epoch, "wall_ms": wall_ms, **parts}
        self.steps.append(row)
        if self.path:
            new = not os.path.exists(self.path)
            with open(self.path, "a") as f:
                if new:
                    f.write(self.CSV_HEADER + "\n")
                f.write(f"{step},{epoch},{parts['loss_total']:.9g},"
                        f"{parts['loss_cls']:.9g},{parts['loss_pts']:.9g},"
                        f"{parts['loss_bnd']:.9g},{wall_ms:.3f}\n")

    def losses(self):
        return [r["loss_total"] for r in self.steps]


# ---------------------------------------------------------------------------
# checkpoint format: versioned little-endian, length-prefixed named tensors


def _write_bytes(f, b):
    f.write(struct.pack("<Q", len(b)))
    f.write(b)


def _read_bytes(f):
    raw = f.read(8)
    if len(raw) != 8:
        raise CheckpointError("truncated checkpoint")
    (n,) = struct.unpack("<Q", raw)
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint")
    return b


def _write_array(f, name, arr):
    _write_bytes(f, name.encode())
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    f.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<Q", d))
    _write_bytes(f, arr.astype("<f8").tobytes())


def _read_array(f):
    name = _read_bytes(f).decode()
    (ndim,) = struct.unpack("<I", f.read(4))
    shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(ndim))
    data = np.frombuffer(_read_bytes(f), dtype="<f8").reshape(shape)
    return name, data.copy()


def _rng_state_bytes(rng) -> bytes:
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise CheckpointError(f"unsupported RNG {st['bit_generator']}")
    inner = st["state"]
    return struct.pack("<16s", b"PCG64") + \
        inner["state"].to_bytes(16, "little") + inner["inc"].to_bytes(16, "little") + \
        struct.pack("<IQ", st["has_uint32"], st["uinteger"])


def _rng_from_bytes(b) -> np.random.Generator:
    kind = struct.unpack_from("<16s", b)[0].rstrip(b"\0")
    if kind != b"PCG64":
        raise CheckpointError(f"unsupported RNG {kind!r}")
    state = int.from_bytes(b[16:32], "little")
    inc = int.from_bytes(b[32:48], "little")
    has_uint32, uinteger = struct.unpack_from("<IQ", b, 48)
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {"bit_generator": "PCG64",
                               "state": {"state": state, "inc": inc},
                               "has_uint32": has_uint32, "uinteger": uinteger}
    return rng


def save_checkpoint(path, cfg, params, adam, rng, epoch, step, wall_seconds):
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        _write_bytes(f, cfg.config_hash().encode())
        f.write(struct.pack("<QQd", epoch, step, wall_seconds))
        _write_bytes(f, _rng_state_bytes(rng))
        for section in (params, adam["m"], adam["v"]):
            f.write(struct.pack("<Q", len(section)))
            for name in sorted(section):
                _write_array(f, name, section[name])
        f.write(struct.pack("<Q", adam["step"]))
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        cfg_hash = _read_bytes(f).decode()
        epoch, step, wall = struct.unpack("<QQd", f.read(24))
        rng = _rng_from_bytes(_read_bytes(f))
        sections = []
        for _ in range(3):
            (n,) = struct.unpack("<Q", f.read(8))
            sec = {}
            for _ in range(n):
                name, arr = _read_array(f)
                sec[name] = arr
            sections.append(sec)
        (adam_t,) = struct.unpack("<Q", f.read(8))
    adam = {"step": adam_t, "m": sections[1], "v": sections[2]}
    return {"config_hash": cfg_hash, "epoch": epoch, "step": step,
            "wall_seconds": wall, "rng": rng, "params": sections[0], "adam": adam}


# ---------------------------------------------------------------------------
# training


def _lr_at(cfg, step):
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return cfg.learning_rate * step / cfg.warmup_steps
    return cfg.learning_rate


def _train_step(scene, params, adam, cfg):
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    loss, parts = scene_loss(scene, leaves, cfg)
    if not np.isfinite(loss.data):
        raise TrainingDivergedError(f"non-finite loss {float(loss.data)}")
    tape.backward(loss)
    grads = {k: t.grad for k, t in leaves.items() if t.grad is not None}
    clip_global_norm(grads, cfg.grad_clip)
    adam_step(params, grads, adam, _lr_at(cfg, adam["step"] + 1),
              (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)
    return parts


def train(cfg, scenes, checkpoint_dir=None, log_path=None, resume_from=None,
          drop_optimizer_state=False, drop_rng_state=False):
    """Train over scenes for cfg.epochs; returns (TrainLog, params, adam).

    resume_from continues a saved checkpoint; the config hash must match.
    The diagnostic flags discard the named part of the restored state so
    the post-resume loss jump can be studied.
    """
    if not scenes:
        raise ValueError("dataset is empty")
    scenes = sorted(scenes, key=lambda s: s.scene_id)
    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        if ck["config_hash"] != cfg.config_hash():
            raise ConfigHashMismatchError(
                f"checkpoint hash {ck['config_hash']} != config hash {cfg.config_hash()}")
        params = ck["params"]
        adam = init_adam_state(params) if drop_optimizer_state else ck["adam"]
        rng = np.random.default_rng(cfg.seed) if drop_rng_state else ck["rng"]
        epoch_start, step, wall = ck["epoch"], ck["step"], ck["wall_seconds"]
    else:
        rng = np.random.default_rng(cfg.seed)
        params = init_model_params(cfg, rng)
        adam = init_adam_state(params)
        epoch_start, step, wall = 0, 0, 0.0

    log = TrainLog(path=log_path)
    if checkpoint_dir:
        os.makedirs(checkpoint_dir, exist_ok=True)

    def save(epoch):
        if checkpoint_dir:
            save_checkpoint(os.path.join(checkpoint_dir, f"ckpt_epoch_{epoch}.bin"),
                            cfg, params, adam, rng, epoch, step, wall)

    if cfg.epochs <= epoch_start:
        save(epoch_start)
        return log, params, adam

    for epoch in range(epoch_start, cfg.epochs):
        t_epoch = time.perf_counter()
        order = rng.permutation(len(scenes))
        for idx in order:
            t_step = time.perf_counter()
            parts = _train_step(scenes[idx], params, adam, cfg)
            step += 1
            log.record(step, epoch, parts, (time.perf_counter() - t_step) * 1e3)
        seconds = time.perf_counter() - t_epoch
        wall += seconds
        log.epoch_seconds.append(seconds)
        done = epoch + 1
        if done % cfg.checkpoint_every == 0 or done == cfg.epochs:
            save(done)
    return log, params, adam


def resume(checkpoint_path, cfg, scenes, **kwargs):
    return train(cfg, scenes, resume_from=checkpoint_path, **kwargs)


# ---------------------------------------------------------------------------
# experiment suite


SUITE_PRESETS = ("baseline-3:6", "shallow-backbone", "2:4", "4:8")


def run_experiment_suite(train_scenes, eval_scenes, epochs, seed=0,
                         presets=SUITE_PRESETS, base_overrides=()):
    """Train every preset on one dataset and compare sec/epoch and mAP.

    Returns a list of row dicts (preset, epochs, sec_per_epoch, map).
    """
    from .config import apply_overrides, preset_config

    gts = groundtruth_by_frame(eval_scenes)
    rows = []
    for name in presets:
        cfg = preset_config(name, epochs=epochs, seed=seed)
        cfg = apply_overrides(cfg, base_overrides)
        log, params, _ = train(cfg, train_scenes)
        preds = {}
        for scene in eval_scenes:
            preds.update(predict_scene(scene, params, cfg))
        report = evaluate(preds, gts)
        rows.append({"preset": name, "epochs": epochs,
                     "sec_per_epoch": float(np.mean(log.epoch_seconds)),
                     "map": report.map_value})
    return rows


def format_suite_table(rows) -> str:
    lines = [f"{'preset':<18} {'epochs':>6} {'sec/epoch':>10} {'mAP':>8}"]
    for r in rows:
        lines.append(f"{r['preset']:<18} {r['epochs']:>6d} "
                     f"{r['sec_per_epoch']:>10.2f} {r['map']:>8.4f}")
    return "\n".join(lines)
