"""Two-stage training loop, resumable training state and the metrics log."""
from __future__ import annotations

import csv
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from ..evalio import HsiCube
from ..networks import DOWNSCALE, build, checkpoint_bytes, load_checkpoint
from ..tensor import make_rng
from .losses import LossWeights, NonFiniteLoss, loss_d, loss_egp
from .optim import AdamState, adam_step

LOG_HEADER = ["step", "stage", "rate_bpp", "distortion", "lambda", "d_loss", "se_l1"]
PRETRAIN, ADVERSARIAL = "pretrain", "adversarial"
EMA_DECAY = 0.99


class TrainingDiverged(RuntimeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


def _encode_rng(obj):
    if isinstance(obj, dict):
        return {k: _encode_rng(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__array__": obj.tolist(), "dtype": str(obj.dtype)}
    return obj


def _decode_rng(obj):
    if isinstance(obj, dict):
        if "__array__" in obj:
            return np.array(obj["__array__"], dtype=obj["dtype"])
        return {k: _decode_rng(v) for k, v in obj.items()}
    return obj


@dataclass
class TrainState:
    step: int = 0
    stage: str = PRETRAIN
    adam_egp: AdamState = field(default_factory=AdamState)
    adam_d: AdamState = field(default_factory=AdamState)
    rng: np.random.Generator = None
    ema_rate: float | None = None
    ema_distortion: float | None = None

    def update_averages(self, rate, dist):
        if self.ema_rate is None:
            self.ema_rate, self.ema_distortion = rate, dist
        else:
            self.ema_rate = EMA_DECAY * self.ema_rate + (1 - EMA_DECAY) * rate
            self.ema_distortion = EMA_DECAY * self.ema_distortion + (1 - EMA_DECAY) * dist

    def to_bytes(self, bundle) -> bytes:
        """JSON header then f64 blocks: value, m, v for every parameter in registry order.

        Parameters without optimizer moments yet store zeros; ``has_m`` records which.
        """
        ids = list(bundle.registry)
        moments = {}
        for st in (self.adam_egp, self.adam_d):
            for pid in st.m:
                moments[pid] = (st.m[pid], st.v[pid])
        head = {
            "step": self.step, "stage": self.stage,
            "t_egp": self.adam_egp.t, "t_d": self.adam_d.t,
            "rng": _encode_rng(self.rng.bit_generator.state),
            "ema_rate": self.ema_rate, "ema_distortion": self.ema_distortion,
            "ids": ids, "has_m": [pid in moments for pid in ids],
        }
        raw = json.dumps(head, sort_keys=True).encode()
        parts = [struct.pack("<I", len(raw)), raw]
        for pid in ids:
            p = bundle.registry[pid]
            m, v = moments.get(pid, (np.zeros_like(p.value), np.zeros_like(p.value)))
            for a in (p.value, m, v):
                parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes, bundle):
        """Rebuild the state and restore the exact f64 parameter values into ``bundle``."""
        (n,) = struct.unpack_from("<I", data)
        head = json.loads(data[4:4 + n])
        if head["ids"] != list(bundle.registry):
            raise ValueError("training state does not match the model parameters")
        pos = 4 + n
        egp = {p.id for p in bundle.egp_params()}
        st = cls(step=head["step"], stage=head["stage"],
                 adam_egp=AdamState(head["t_egp"]), adam_d=AdamState(head["t_d"]),
                 ema_rate=head["ema_rate"], ema_distortion=head["ema_distortion"])
        for pid, has_m in zip(head["ids"], head["has_m"]):
            p = bundle.registry[pid]
            size = 8 * p.value.size
            blocks = []
            for _ in range(3):
                blocks.append(np.frombuffer(data[pos:pos + size], dtype="<f8").reshape(p.shape))
                pos += size
            p.value[...] = blocks[0]
            if has_m:
                target = st.adam_egp if pid in egp else st.adam_d
                target.m[pid] = blocks[1].copy()
                target.v[pid] = blocks[2].copy()
        if pos != len(data):
            raise ValueError("trailing bytes in training state")
        st.rng = np.random.Generator(np.random.Philox())
        st.rng.bit_generator.state = _decode_rng(head["rng"])
        return st


def save_training_checkpoint(bundle, state, path):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(checkpoint_bytes(bundle, state.to_bytes(bundle)))
    os.replace(tmp, path)


def load_training_checkpoint(path):
    """``(bundle, state)``; ``state`` is None for checkpoints without one."""
    bundle, appendix = load_checkpoint(path)
    state = TrainState.from_bytes(appendix, bundle) if appendix is not None else None
    return bundle, state


def _as_batch_array(data):
    if isinstance(data, np.ndarray):
        arr = data
    else:
        arr = np.stack([c.values if isinstance(c, HsiCube) else np.asarray(c) for c in data])
    if arr.ndim != 4 or arr.shape[0] == 0:
        raise ValueError("training data must be a nonempty stack of [B, H, W] cubes")
    # same edge padding the codec applies
    pb, pr = -arr.shape[2] % DOWNSCALE, -arr.shape[3] % DOWNSCALE
    if pb or pr:
        arr = np.pad(arr, ((0, 0), (0, 0), (0, pb), (0, pr)), mode="edge")
    return np.asarray(arr, dtype=np.float64)


@dataclass
class TrainResult:
    bundle: object
    state: TrainState
    log: list


def _fmt(v):
    return "" if v is None else repr(v)


def train(config, data, weights=None, r_t=None, steps_pretrain=200, steps_gan=200, seed=0,
          batch_size=8, lr=1e-4, lr_d=1e-4, rate_mode="pixel", log_path=None,
          checkpoint_path=None, checkpoint_every=None, resume=None, stop_after=None):
    """Pretrain with beta = 0, then alternate one D step and one E/G/P step.

    ``data`` is a stack ``[n, B, H, W]`` or a list of cubes. ``resume`` is a
    ``(bundle, state)`` pair from :func:`load_training_checkpoint`; the run
    continues from ``state.step``. ``stop_after`` ends the run early after
    that many total steps (used to simulate an interrupted job).
    Each logged row carries the training objective in ``objective`` as well.
    """
    weights = weights or LossWeights()
    x_all = _as_batch_array(data)
    if resume is not None:
        bundle, state = resume
        if state is None:
            raise ValueError("checkpoint has no training state to resume from")
    else:
        bundle = build(config)
        state = TrainState(rng=make_rng(seed))
    total = steps_pretrain + steps_gan
    end = total if stop_after is None else min(total, stop_after)
    egp, dps = bundle.egp_params(), bundle.d_params()

    log = []
    fh = writer = None
    if log_path is not None:
        append = state.step > 0 and os.path.exists(log_path)
        fh = open(log_path, "a" if append else "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        if not append:
            writer.writerow(LOG_HEADER)
    try:
        while state.step < end:
            state.stage = PRETRAIN if state.step < steps_pretrain else ADVERSARIAL
            idx = state.rng.integers(0, x_all.shape[0], size=batch_size)
            x = x_all[idx]
            try:
                d_val = None
                if state.stage == ADVERSARIAL:
                    d_val = loss_d(bundle, x)
                    _finite_grads("discriminator", dps)
                beta = 0.0 if state.stage == PRETRAIN else weights.beta
                res = loss_egp(bundle, x, weights, r_t=r_t, beta=beta, rate_mode=rate_mode)
                _finite_grads("encoder/generator/prior", egp)
            except (NonFiniteLoss, FloatingPointError) as exc:
                ckpt = None
                if checkpoint_path is not None:
                    save_training_checkpoint(bundle, state, checkpoint_path)
                    ckpt = checkpoint_path
                raise TrainingDiverged(f"training diverged at step {state.step + 1}: {exc}",
                                       ckpt) from exc
            if d_val is not None:
                adam_step(state.adam_d, dps, lr=lr_d)
            adam_step(state.adam_egp, egp, lr=lr)
            state.step += 1
            state.update_averages(res.rate_bpp, res.distortion.value)
            row = {"step": state.step, "stage": state.stage, "rate_bpp": res.rate_bpp,
                   "distortion": res.distortion.value, "lambda": res.lam, "d_loss": d_val,
                   "se_l1": res.se_l1, "objective": res.total}
            log.append(row)
            if writer is not None:
                writer.writerow([_fmt(row[k]) if k != "stage" else row[k] for k in LOG_HEADER])
                fh.flush()
            if checkpoint_path and checkpoint_every and state.step % checkpoint_every == 0:
                save_training_checkpoint(bundle, state, checkpoint_path)
    finally:
        if fh is not None:
            fh.close()
    if checkpoint_path is not None:
        save_training_checkpoint(bundle, state, checkpoint_path)
    return TrainResult(bundle, state, log)


def _finite_grads(group, params):
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in {group} parameter {p.id}")


def read_log(path):
    """Rows of a metrics CSV with numeric fields parsed (empty -> None)."""
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out = {"step": int(r["step"]), "stage": r["stage"]}
            for k in LOG_HEADER[2:]:
                out[k] = float(r[k]) if r[k] != "" else None
            rows.append(out)
    return rows
