"""Training loop, scan-level splitting and byte-stable checkpoints.

Every stochastic choice (batch order, prompt dropout) is drawn from one
seeded generator whose state rides along in the checkpoint, so resuming a
run reproduces the uninterrupted run bit for bit.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor
from .errors import BadCheckpoint, DataError
from .labels import LabelSpace
from .loss import ShardPlan, loss_graph
from .model import DualEncoder, ModelConfig
from .optim import Adam, AdamConfig, clamp_log_tau
from .prompts import PromptBank, PromptConfig
from .synth import SyntheticSlice

CHECKPOINT_MAGIC = b"MRCC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class RunConfig:
    """Desk-scale training defaults; all overridable from the CLI."""

    batch_size: int = 256
    epochs: int = 20
    seed: int = 0
    lr: float = 3e-3
    warmup_steps: int = 100
    weight_decay: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.98
    loss_kind: str = "supcon"
    shards: int = 1
    text_dropout: float = 0.2
    numerical_only: bool = False
    include_series_description: bool = False
    val_fraction: float = 0.2
    d_hidden: int = 64
    d_emb: int = 32
    d_tok: int = 32
    vocab_size: int = 8192
    tau_init: float = 0.07

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def config_hash(run: RunConfig, label_space_hash: str) -> str:
    blob = json.dumps(
        {"run": run.to_dict(), "label_space": label_space_hash}, sort_keys=True
    ).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def split_by_scan(
    scan_ids: np.ndarray, val_fraction: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Row masks (train, eval) split at scan granularity."""
    scans = np.unique(scan_ids)
    rng = np.random.Generator(np.random.PCG64(seed))
    perm = rng.permutation(scans.size)
    n_eval = int(round(val_fraction * scans.size))
    if val_fraction > 0:
        n_eval = max(1, min(n_eval, scans.size - 1))
    eval_scans = set(scans[perm[:n_eval]].tolist())
    eval_mask = np.array([int(s) in eval_scans for s in scan_ids])
    return ~eval_mask, eval_mask


def dataset_arrays(
    slices: Sequence[SyntheticSlice],
) -> tuple[np.ndarray, np.ndarray, list]:
    features = np.stack([s.features for s in slices]).astype(np.float64)
    scan_ids = np.array([s.scan_id for s in slices], dtype=np.int64)
    records = [s.record for s in slices]
    return features, scan_ids, records


@dataclass
class TrainState:
    model: DualEncoder
    optimizer: Adam
    rng: np.random.Generator
    epochs_done: int
    log_lines: list[str] = field(default_factory=list)


def _new_state(run: RunConfig, d_in: int) -> TrainState:
    model_config = ModelConfig(
        d_in=d_in,
        d_hidden=run.d_hidden,
        d_emb=run.d_emb,
        d_tok=run.d_tok,
        vocab_size=run.vocab_size,
        tau_init=run.tau_init,
    )
    model = DualEncoder(model_config, seed=run.seed)
    adam = Adam(
        model.parameters(),
        AdamConfig(
            lr=run.lr,
            beta1=run.beta1,
            beta2=run.beta2,
            weight_decay=run.weight_decay,
            warmup_steps=run.warmup_steps,
        ),
    )
    rng = np.random.Generator(np.random.PCG64(run.seed))
    return TrainState(model=model, optimizer=adam, rng=rng, epochs_done=0)


def train_model(
    slices: Sequence[SyntheticSlice],
    space: LabelSpace,
    label_ids: np.ndarray,
    run: RunConfig,
    resume_from: Optional["Checkpoint"] = None,
    checkpoint_path: Optional[str] = None,
) -> TrainState:
    """Train on the scan-level training split; returns the final state.

    When checkpoint_path is given the full state is rewritten after every
    epoch, so an interrupted run can resume bit-identically.
    """
    features, scan_ids, records = dataset_arrays(slices)
    train_mask, _ = split_by_scan(scan_ids, run.val_fraction, run.seed)
    train_rows = np.flatnonzero(train_mask)
    if train_rows.size == 0:
        raise DataError("training split is empty")

    bank = PromptBank(
        records,
        PromptConfig(
            dropout=run.text_dropout,
            numerical_only=run.numerical_only,
            include_series_description=run.include_series_description,
        ),
    )
    space_hash = space.hash_hex
    cfg_hash = config_hash(run, space_hash)

    if resume_from is not None:
        if resume_from.label_space_hash != space_hash:
            raise BadCheckpoint("checkpoint was trained on a different label space")
        state = resume_from.restore()
    else:
        state = _new_state(run, features.shape[1])

    n_train = train_rows.size
    step = state.optimizer.t
    for epoch in range(state.epochs_done, run.epochs):
        perm = state.rng.permutation(n_train)
        for start in range(0, n_train, run.batch_size):
            rows = train_rows[perm[start : start + run.batch_size]]
            batch_features = features[rows]
            batch_labels = label_ids[rows]
            token_lists = []
            for r in rows:
                if run.text_dropout > 0:
                    uniforms = state.rng.random(bank.n_droppable(int(r)))
                    token_lists.append(bank.tokens_with_dropout(int(r), uniforms))
                else:
                    token_lists.append(bank.tokens_full(int(r)))

            model = state.model
            img = model.encode_images(batch_features)
            txt = model.encode_texts(token_lists)
            plan = ShardPlan.even(len(rows), run.shards)
            out = loss_graph(
                img, txt, batch_labels, model.tau(), run.loss_kind, plan
            )
            model.zero_grad()
            out.backward()
            lr_eff = state.optimizer.step()
            clamp_log_tau(model.log_tau)
            step += 1
            state.log_lines.append(
                json.dumps(
                    {
                        "epoch": epoch,
                        "step": step,
                        "loss": float(out.data),
                        "lr": lr_eff,
                        "tau": float(model.tau().data),
                    },
                    sort_keys=True,
                )
            )
        state.epochs_done = epoch + 1
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, state, run, space_hash, cfg_hash)
    return state


# --- checkpoint blob ---------------------------------------------------------


@dataclass
class Checkpoint:
    run: RunConfig
    model_config: ModelConfig
    epochs_done: int
    rng_state: dict
    label_space_hash: str
    config_hash: str
    params: dict[str, np.ndarray]
    adam_t: int
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]

    def restore(self) -> TrainState:
        model = DualEncoder(self.model_config, seed=self.run.seed)
        for name, p, _ in model.parameters():
            p.data = self.params[name].copy()
        adam = Adam(
            model.parameters(),
            AdamConfig(
                lr=self.run.lr,
                beta1=self.run.beta1,
                beta2=self.run.beta2,
                weight_decay=self.run.weight_decay,
                warmup_steps=self.run.warmup_steps,
            ),
        )
        adam.load_state_dict(
            {"t": self.adam_t, "m": self.adam_m, "v": self.adam_v}
        )
        rng = np.random.Generator(np.random.PCG64(0))
        rng.bit_generator.state = self.rng_state
        return TrainState(
            model=model,
            optimizer=adam,
            rng=rng,
            epochs_done=self.epochs_done,
        )


def checkpoint_bytes(
    state: TrainState, run: RunConfig, label_space_hash: str, cfg_hash: str
) -> bytes:
    params = state.model.parameters()
    manifest = [[name, list(p.data.shape)] for name, p, _ in params]
    header = {
        "version": CHECKPOINT_VERSION,
        "run": run.to_dict(),
        "model": state.model.config.to_dict(),
        "epochs_done": state.epochs_done,
        "rng_state": _rng_state_to_json(state.rng.bit_generator.state),
        "label_space_hash": label_space_hash,
        "config_hash": cfg_hash,
        "adam_t": state.optimizer.t,
        "params": manifest,
    }
    head = json.dumps(header, sort_keys=True).encode()
    blobs = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(head)), head]
    for name, p, _ in params:
        blobs.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    for name, _, _ in params:
        blobs.append(np.ascontiguousarray(state.optimizer.m[name], dtype="<f8").tobytes())
    for name, _, _ in params:
        blobs.append(np.ascontiguousarray(state.optimizer.v[name], dtype="<f8").tobytes())
    return b"".join(blobs)


def save_checkpoint(
    path: str, state: TrainState, run: RunConfig, label_space_hash: str, cfg_hash: str
) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(state, run, label_space_hash, cfg_hash))


def _rng_state_to_json(state: dict) -> dict:
    return {
        "bit_generator": state["bit_generator"],
        "state": {
            "state": str(state["state"]["state"]),
            "inc": str(state["state"]["inc"]),
        },
        "has_uint32": int(state["has_uint32"]),
        "uinteger": int(state["uinteger"]),
    }


def _rng_state_from_json(obj: dict) -> dict:
    return {
        "bit_generator": obj["bit_generator"],
        "state": {
            "state": int(obj["state"]["state"]),
            "inc": int(obj["state"]["inc"]),
        },
        "has_uint32": int(obj["has_uint32"]),
        "uinteger": int(obj["uinteger"]),
    }


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise BadCheckpoint("not a checkpoint file (bad magic)")
    version, head_len = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise BadCheckpoint(f"unknown checkpoint version {version}")
    try:
        header = json.loads(data[12 : 12 + head_len])
    except json.JSONDecodeError as exc:
        raise BadCheckpoint(f"corrupt header: {exc}") from exc
    offset = 12 + head_len
    manifest = [(name, tuple(shape)) for name, shape in header["params"]]

    def read_arrays() -> dict[str, np.ndarray]:
        nonlocal offset
        out = {}
        for name, shape in manifest:
            n = int(np.prod(shape)) if shape else 1
            raw = data[offset : offset + 8 * n]
            if len(raw) != 8 * n:
                raise BadCheckpoint(f"truncated tensor data for {name}")
            out[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            offset += 8 * n
        return out

    params = read_arrays()
    adam_m = read_arrays()
    adam_v = read_arrays()
    run = RunConfig(**header["run"])
    model_config = ModelConfig(**header["model"])
    return Checkpoint(
        run=run,
        model_config=model_config,
        epochs_done=int(header["epochs_done"]),
        rng_state=_rng_state_from_json(header["rng_state"]),
        label_space_hash=header["label_space_hash"],
        config_hash=header["config_hash"],
        params=params,
        adam_t=int(header["adam_t"]),
        adam_m=adam_m,
        adam_v=adam_v,
    )
