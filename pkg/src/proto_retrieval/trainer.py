"""Mini-batch training loop, checkpoints and loss history."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .config import HyperParams, validate
from .data import QueryRecord, VideoRecord, epoch_order, mix_videos
from .model import ProtoPRVR, pad_tokens, prepare_videos
from .gradcheck import grad_check  # noqa: F401  (re-exported)
from .objectives import NonFiniteLossError, choose_mask, total_loss

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("step", "mixed", "total", "ret", "crecon", "urecon", "attn", "ortho")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainState:
    model: ProtoPRVR
    optimizer: torch.optim.Optimizer
    config: HyperParams
    step: int = 0
    history: list[dict] = field(default_factory=list)


def init_state(config: HyperParams, d_in: int, d_txt: int, max_query_len: int = 64) -> TrainState:
    validate(config)
    torch.manual_seed(config.seed)
    model = ProtoPRVR(config, d_in, d_txt, max_query_len)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    return TrainState(model, optimizer, config)


# ── Batch construction ──────────────────────────────────────

@dataclass
class StepInputs:
    videos: object          # VideoBatch
    tokens: torch.Tensor
    token_mask: torch.Tensor
    pairing: np.ndarray
    masked_idx: torch.Tensor
    ignore: np.ndarray | None
    labels: np.ndarray | None
    query_ids: list[str]
    video_ids: list[str]

    @property
    def mixed(self) -> bool:
        return self.labels is not None


def step_batch(queries, config: HyperParams, step: int) -> list[QueryRecord]:
    """Queries of training step ``step``; depends only on ``(seed, step)``."""
    size = min(config.batch_size, len(queries))
    per_epoch = len(queries) // size
    epoch, offset = divmod(step, per_epoch)
    order = epoch_order(len(queries), config.seed, epoch)
    return [queries[i] for i in order[offset * size:(offset + 1) * size]]


def build_inputs(batch_queries, by_id: dict, config: HyperParams, rng: np.random.Generator,
                 mixed: bool, dtype=torch.float32, all_ids: list[str] | None = None) -> StepInputs:
    tokens, token_mask, lengths = pad_tokens([q.tokens for q in batch_queries], dtype)
    masked_idx = torch.as_tensor(choose_mask(lengths, config.mask_ratio, rng), dtype=torch.long)
    targets = [q.target_video_id for q in batch_queries]

    if not mixed:
        video_ids = list(dict.fromkeys(targets))
        column = {vid: i for i, vid in enumerate(video_ids)}
        pairing = np.array([column[t] for t in targets])
        vb = prepare_videos([by_id[v].frames for v in video_ids], config, dtype=dtype)
        return StepInputs(vb, tokens, token_mask, pairing, masked_idx, None, None,
                          [q.query_id for q in batch_queries], video_ids)

    # one mixed instance per query, partner drawn from the other videos of the batch
    pool = sorted(set(targets))
    frames, members, labels, sources = [], [], [], []
    for target in targets:
        others = [v for v in pool if v != target] or [v for v in (all_ids or by_id) if v != target]
        partner = others[int(rng.integers(len(others)))]
        first = bool(rng.random() < 0.5)
        a, b = (target, partner) if first else (partner, target)
        mv = mix_videos(by_id[a], by_id[b], query_first=first, subsample=config.mix_subsample)
        frames.append(mv.frames)
        members.append(mv.membership)
        labels.append(mv.label)
        sources.append(set(mv.source_ids))
    n = len(targets)
    ignore = np.array([[i != j and targets[i] in sources[j] for j in range(n)] for i in range(n)])
    vb = prepare_videos(frames, config, memberships=members, dtype=dtype)
    return StepInputs(vb, tokens, token_mask, np.arange(n), masked_idx, ignore, np.array(labels),
                      [q.query_id for q in batch_queries], [f"mix{i}" for i in range(n)])


def step_inputs(state: TrainState, videos, queries, by_id=None) -> StepInputs:
    cfg = state.config
    by_id = by_id or {v.video_id: v for v in videos}
    rng = np.random.default_rng([cfg.seed, state.step, 7])
    mixed = bool(rng.random() < cfg.mix_probability)
    batch = step_batch(queries, cfg, state.step)
    return build_inputs(batch, by_id, cfg, rng, mixed, state.model.dtype,
                        all_ids=[v.video_id for v in videos])


# ── Loop ────────────────────────────────────────────────────

def train_step(state: TrainState, videos, queries, by_id=None, dump_dir=None) -> dict:
    inputs = step_inputs(state, videos, queries, by_id)
    model = state.model
    model.train()
    parts = model.losses(inputs.videos, inputs.tokens, inputs.token_mask, inputs.pairing,
                         inputs.masked_idx, inputs.ignore, inputs.labels)
    try:
        loss = total_loss(parts, state.config)
    except NonFiniteLossError as exc:
        _dump_failure(state, inputs, parts, dump_dir)
        raise TrainingDiverged(f"step {state.step}: {exc}; batch queries {inputs.query_ids}") from exc
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    record = {"step": state.step, "mixed": int(inputs.mixed), "total": float(loss.detach())}
    record.update({k: float(v.detach()) for k, v in parts.items()})
    state.history.append(record)
    state.step += 1
    return record


def train(videos: list[VideoRecord], queries: list[QueryRecord], config: HyperParams, steps: int,
          state: TrainState | None = None, patience: int = 0, dump_dir=None,
          log_every: int = 0) -> TrainState:
    """Run ``steps`` optimisation steps and return the state (history included).

    ``patience > 0`` stops early once the smoothed total loss has not improved
    for that many steps.
    """
    validate(config)
    if len(videos) < 2:
        raise ValueError("training needs at least two videos")
    if len(queries) < 2:
        raise ValueError("training needs at least two queries")
    if state is None:
        state = init_state(config, videos[0].frames.shape[1], queries[0].tokens.shape[1],
                           max(64, max(len(q.tokens) for q in queries)))
    by_id = {v.video_id: v for v in videos}
    best, since_best, ema = math.inf, 0, None
    for _ in range(steps):
        record = train_step(state, videos, queries, by_id, dump_dir)
        if log_every and record["step"] % log_every == 0:
            log.info("step %d total %.4f ret %.4f", record["step"], record["total"], record["ret"])
        if patience:
            ema = record["total"] if ema is None else 0.98 * ema + 0.02 * record["total"]
            if ema < best - 1e-6:
                best, since_best = ema, 0
            else:
                since_best += 1
                if since_best >= patience:
                    log.info("early stop at step %d", record["step"])
                    break
    return state


def _dump_failure(state, inputs, parts, dump_dir):
    if dump_dir is None:
        return
    Path(dump_dir).mkdir(parents=True, exist_ok=True)
    payload = {
        "step": state.step,
        "query_ids": inputs.query_ids,
        "video_ids": inputs.video_ids,
        "mixed": inputs.mixed,
        "parts": {k: float(v.detach()) for k, v in parts.items()},
    }
    (Path(dump_dir) / f"diverged_step{state.step}.json").write_text(json.dumps(payload, indent=2))


def write_history_csv(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_FIELDS)
        for rec in history:
            writer.writerow([rec["step"], rec["mixed"]] + [f"{rec[k]:.8g}" for k in HISTORY_FIELDS[2:]])


# ── Checkpoints ─────────────────────────────────────────────
# magic "PRCK" | u32 version | u32 header bytes | JSON header | tensor blobs | u32 crc32

CKPT_MAGIC = b"PRCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _tensor_blobs(state: TrainState):
    blobs = [(f"model/{k}", v) for k, v in state.model.state_dict().items()]
    opt = state.optimizer.state_dict()
    for idx, slots in sorted(opt["state"].items()):
        for slot, value in sorted(slots.items()):
            blobs.append((f"optim/{idx}/{slot}", torch.as_tensor(value)))
    return blobs, opt["param_groups"]


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    blobs, groups = _tensor_blobs(state)
    entries, payload, offset = [], io.BytesIO(), 0
    for name, tensor in blobs:
        arr = tensor.detach().contiguous().numpy()
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        payload.write(raw)
        offset += len(raw)
    model = state.model
    header = json.dumps({
        "config": state.config.to_dict(),
        "d_in": model.d_in,
        "d_txt": model.d_txt,
        "max_query_len": model.max_query_len,
        "dtype": str(model.dtype).replace("torch.", ""),
        "step": state.step,
        "param_groups": groups,
        "tensors": entries,
    }, sort_keys=True).encode("utf-8")
    body = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(header)) + header + payload.getvalue()
    body += struct.pack("<I", zlib.crc32(body))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> TrainState:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, header_len = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    header = json.loads(data[12:12 + header_len])
    base = 12 + header_len
    tensors = {}
    for e in header["tensors"]:
        raw = data[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<")).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.copy())

    config = cfgmod.HyperParams(**header["config"])
    model = ProtoPRVR(config, header["d_in"], header["d_txt"], header["max_query_len"])
    model = model.to(getattr(torch, header["dtype"]))
    model.load_state_dict({k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")})
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    opt_state = {}
    for name, value in tensors.items():
        if name.startswith("optim/"):
            _, idx, slot = name.split("/")
            opt_state.setdefault(int(idx), {})[slot] = value
    optimizer.load_state_dict({"state": opt_state, "param_groups": header["param_groups"]})
    return TrainState(model, optimizer, config, step=header["step"])
