"""Alternating discriminator / generator optimisation, validation and checkpoints."""
from __future__ import annotations

import base64
import csv
import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .core import ConfigError
from .data import Sample, iterate_minibatches
from .losses import (
    LOG_FIELDS,
    Batch,
    Fakes,
    LossReport,
    LossWeights,
    discriminator_objective,
    generate_fakes,
    generator_objective,
)
from .model import ArchConfig, TagGANNets, init_params

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TAGGAN"
CHECKPOINT_VERSION = 1
TELEMETRY_FIELDS = ["epoch", "iter", "d_normal_real", "d_normal_fake"]
DIVERGENCE_PATIENCE = 3


class DivergenceError(RuntimeError):
    """A loss or gradient stayed non-finite; ``term`` names the offender."""

    def __init__(self, term: str, message: str = ""):
        super().__init__(message or f"training diverged: non-finite {term}")
        self.term = term


class CheckpointError(ValueError):
    """Unreadable, corrupt or unsupported checkpoint file."""


@dataclass
class TrainConfig:
    batch_size: int = 1
    learning_rate: float = 0.001
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    epochs: int = 100
    validate_every: int = 5
    patience: Optional[int] = 10
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    arch: ArchConfig = field(default_factory=ArchConfig)

    def __post_init__(self) -> None:
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.arch, dict):
            self.arch = ArchConfig(**self.arch)
        self.validate()

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise ConfigError("learning_rate must be finite and >= 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.validate_every < 1:
            raise ConfigError("validate_every must be >= 1")
        if self.patience is not None and self.patience < 1:
            raise ConfigError("patience must be >= 1 (or None to disable early stopping)")
        self.arch.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class ValidationReport:
    l_cyc: float
    d_normal_real: Optional[float]
    d_normal_fake: Optional[float]
    d_abnormal_real: Optional[float]
    d_abnormal_fake: Optional[float]
    poi: Optional[float] = None


@dataclass
class TrainState:
    """Everything needed to continue training bit-exactly."""

    config: TrainConfig
    nets: TagGANNets
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    epoch: int = 0
    iteration: int = 0
    best_val: Optional[float] = None
    bad_rounds: int = 0
    stopped: bool = False
    log_tail: Optional[LossReport] = None
    bad_streak: int = 0


def new_state(cfg: TrainConfig) -> TrainState:
    nets = init_params(cfg.arch, cfg.seed)
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    opt_g = torch.optim.Adam(nets.generator_parameters(), lr=cfg.learning_rate, betas=betas)
    opt_d = torch.optim.Adam(nets.discriminator_parameters(), lr=cfg.learning_rate, betas=betas)
    return TrainState(cfg, nets, opt_g, opt_d)


# --------------------------------------------------------------------------- single updates

def _finite_or_raise(parts: dict, params) -> None:
    for name, v in parts.items():
        if not torch.isfinite(v).all():
            raise DivergenceError(name)
    for p in params:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise DivergenceError("gradient")


def _detached(fakes: Fakes) -> Fakes:
    return Fakes(*(t.detach() for t in fakes))


def update_discriminators(nets: TagGANNets, optimizer: torch.optim.Optimizer, batch: Batch,
                          w: LossWeights, fakes: Optional[Fakes] = None) -> dict:
    """One optimiser step on both discriminators; generators are left untouched.

    Returns the loss parts (tensors, evaluated before the step).
    """
    if fakes is None:
        with torch.no_grad():
            fakes = generate_fakes(nets, batch)
    optimizer.zero_grad(set_to_none=True)
    total_d, parts = discriminator_objective(nets, batch, _detached(fakes), w)
    total_d.backward()
    _finite_or_raise(parts, nets.discriminator_parameters())
    optimizer.step()
    return parts


def update_generators(nets: TagGANNets, optimizer: torch.optim.Optimizer, batch: Batch,
                      w: LossWeights, fakes: Optional[Fakes] = None) -> dict:
    """One optimiser step on both generators; discriminators are left untouched."""
    if fakes is None:
        fakes = generate_fakes(nets, batch)
    optimizer.zero_grad(set_to_none=True)
    total_g, parts = generator_objective(nets, batch, fakes, w)
    d_params = nets.discriminator_parameters()
    for p in d_params:
        p.requires_grad_(False)
    try:
        total_g.backward()
    finally:
        for p in d_params:
            p.requires_grad_(True)
    _finite_or_raise(parts, nets.generator_parameters())
    optimizer.step()
    return parts


def make_batch(abnormal: Sequence[Sample], normal: Sequence[Sample], b: Sequence[int]) -> Batch:
    x = torch.from_numpy(np.stack([s.image for s in abnormal])[:, None].astype(np.float32))
    y = torch.from_numpy(np.stack([s.image for s in normal])[:, None].astype(np.float32))
    c = torch.tensor([s.label for s in abnormal], dtype=torch.long)
    return Batch(x, c, y, torch.as_tensor(list(b), dtype=torch.long))


# --------------------------------------------------------------------------- validation

def _val_backward_labels(n: int, n_domains: int) -> list[int]:
    return [i % n_domains for i in range(n)]


@torch.no_grad()
def validate(nets: TagGANNets, val_ds: Sequence[Sample], constraint=None) -> ValidationReport:
    """Mean cycle loss and discriminator outputs on ``val_ds`` (no parameter mutation).

    The cycle loss is the mean forward term over abnormal samples plus the
    mean backward term over normal samples. PoI is reported when abnormal
    samples carry ground-truth boxes.
    """
    from .metrics import poi
    from .tagging import ConstraintConfig, constrain_to_mask

    if len(val_ds) == 0:
        raise ConfigError("validation set is empty")
    n_domains = nets.arch.n_domains
    abnormal = [s for s in val_ds if s.abnormal]
    normal = [s for s in val_ds if not s.abnormal]
    fwd, bwd = [], []
    dn_real, dn_fake, da_real, da_fake, pois = [], [], [], [], []
    constraint = constraint or ConstraintConfig.for_size(nets.arch.image_size)
    for s in abnormal:
        x = torch.from_numpy(s.image[None, None].astype(np.float32))
        c = torch.tensor([s.label])
        m = nets.g_map(x, c)
        fake_normal = x - m
        rec = nets.g_recon(fake_normal, c)
        fwd.append(float((rec - x).abs().mean()))
        dn_fake.append(float(nets.d_normal(fake_normal)[0].mean()))
        da_real.append(float(nets.d_abnormal(x)[0].mean()))
        da_fake.append(float(nets.d_abnormal(rec)[0].mean()))
        if s.gt_boxes is not None:
            mask, _ = constrain_to_mask(m[0, 0].numpy(), constraint)
            pois.append(poi(mask, s.gt_boxes))
    for i, s in enumerate(normal):
        y = torch.from_numpy(s.image[None, None].astype(np.float32))
        b = torch.tensor([_val_backward_labels(len(normal), n_domains)[i]])
        gen = nets.g_recon(y, b)
        rec = gen - nets.g_map(gen, b)
        bwd.append(float((rec - y).abs().mean()))
        dn_real.append(float(nets.d_normal(y)[0].mean()))

    def mean(v):
        return float(np.mean(v)) if v else None

    l_cyc = (mean(fwd) or 0.0) + (mean(bwd) or 0.0)
    return ValidationReport(l_cyc, mean(dn_real), mean(dn_fake), mean(da_real), mean(da_fake), mean(pois))


# --------------------------------------------------------------------------- training loop

def split_classes(ds: Sequence[Sample]) -> tuple[list[Sample], list[Sample]]:
    abnormal = [s for s in ds if s.abnormal]
    normal = [s for s in ds if not s.abnormal]
    return abnormal, normal


def _epoch_plan(cfg: TrainConfig, epoch: int, abnormal, normal):
    """Deterministic (abnormal batch, normal batch, backward labels) triples for one epoch.

    One iteration per batch of the larger class; the smaller class is cycled.
    """
    seed = [cfg.seed, epoch]
    a_batches = list(iterate_minibatches(abnormal, cfg.batch_size, np.random.SeedSequence(seed + [0]).generate_state(1)[0]))
    n_batches = list(iterate_minibatches(normal, cfg.batch_size, np.random.SeedSequence(seed + [1]).generate_state(1)[0]))
    n_iter = max(len(a_batches), len(n_batches))
    label_rng = np.random.default_rng(seed + [2])
    for i in range(n_iter):
        nb = n_batches[i % len(n_batches)]
        b = label_rng.integers(0, cfg.arch.n_domains, size=len(nb))
        yield a_batches[i % len(a_batches)], nb, b


def iterations_per_epoch(cfg: TrainConfig, ds: Sequence[Sample]) -> int:
    abnormal, normal = split_classes(ds)
    return max(math.ceil(len(abnormal) / cfg.batch_size), math.ceil(len(normal) / cfg.batch_size))


def train_step(state: TrainState, batch: Batch) -> tuple[LossReport, dict]:
    """Discriminator step followed by generator step on the same minibatch."""
    nets, w = state.nets, state.config.weights
    fakes = generate_fakes(nets, batch)
    dparts = update_discriminators(nets, state.opt_d, batch, w, fakes)
    gparts = update_generators(nets, state.opt_g, batch, w, fakes)
    merged = {**dparts, **gparts}
    report = LossReport(**{k: float(merged[k].detach()) for k in LOG_FIELDS})
    telemetry = {k: float(merged[k].detach()) for k in ("d_normal_real", "d_normal_fake")}
    return report, telemetry


def run_epoch(state: TrainState, train_ds, val_ds=None,
              on_iteration: Optional[Callable[[TrainState, LossReport, dict], None]] = None) -> None:
    """Train for one epoch, validating every ``validate_every`` iterations."""
    cfg = state.config
    abnormal, normal = split_classes(train_ds)
    for a_batch, n_batch, b in _epoch_plan(cfg, state.epoch, abnormal, normal):
        batch = make_batch(a_batch, n_batch, b)
        try:
            report, telemetry = train_step(state, batch)
            state.bad_streak = 0
        except DivergenceError as err:
            # the failing optimiser has not stepped; skip the batch
            state.bad_streak += 1
            log.warning("non-finite %s at iteration %d", err.term, state.iteration)
            if state.bad_streak >= DIVERGENCE_PATIENCE:
                raise
            state.iteration += 1
            continue
        state.iteration += 1
        state.log_tail = report
        if on_iteration is not None:
            on_iteration(state, report, telemetry)
        if val_ds and cfg.patience is not None and state.iteration % cfg.validate_every == 0:
            vr = validate(state.nets, val_ds)
            if state.best_val is None or vr.l_cyc < state.best_val:
                state.best_val, state.bad_rounds = vr.l_cyc, 0
            else:
                state.bad_rounds += 1
            log.debug("validation at iter %d: l_cyc=%.4f (bad rounds %d)", state.iteration, vr.l_cyc, state.bad_rounds)
            if state.bad_rounds >= cfg.patience:
                state.stopped = True
                break
    state.epoch += 1


def train(cfg: TrainConfig, train_ds: Sequence[Sample], val_ds: Optional[Sequence[Sample]] = None,
          out_dir=None, checkpoint_every: Optional[int] = None, resume: Optional["Checkpoint"] = None,
          progress: Optional[Callable[[TrainState], None]] = None) -> "Checkpoint":
    """Run the alternating optimisation and return the final checkpoint.

    With ``out_dir`` set, the per-iteration loss log (``train_log.csv``),
    discriminator telemetry (``train_telemetry.csv``) and, every
    ``checkpoint_every`` epochs, ``checkpoint_epoch{e:03d}.ckpt`` are written there.
    """
    cfg.validate()
    abnormal, normal = split_classes(train_ds)
    if not abnormal or not normal:
        raise ConfigError("training set needs at least one abnormal and one normal sample")
    for s in abnormal:
        if not 0 <= s.label < cfg.arch.n_domains:
            raise ConfigError(f"sample {s.id}: label {s.label} out of range")
    state = new_state(cfg) if resume is None else resume.to_state()
    if resume is not None:
        state.config.epochs = cfg.epochs

    log_fh = tel_fh = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        mode = "a" if resume is not None and (out / "train_log.csv").exists() else "w"
        log_fh = open(out / "train_log.csv", mode, newline="")
        tel_fh = open(out / "train_telemetry.csv", mode, newline="")
        log_w = csv.writer(log_fh, lineterminator="\n")
        tel_w = csv.writer(tel_fh, lineterminator="\n")
        if mode == "w":
            log_w.writerow(["epoch", "iter", *LOG_FIELDS])
            tel_w.writerow(TELEMETRY_FIELDS)

    def on_iteration(st: TrainState, report: LossReport, telemetry: dict) -> None:
        if log_fh is not None:
            log_w.writerow([st.epoch, st.iteration, *(repr(v) for v in report.as_row())])
            tel_w.writerow([st.epoch, st.iteration, repr(telemetry["d_normal_real"]), repr(telemetry["d_normal_fake"])])

    try:
        while state.epoch < cfg.epochs and not state.stopped:
            run_epoch(state, train_ds, val_ds, on_iteration)
            if progress is not None:
                progress(state)
            if out_dir is not None and checkpoint_every and state.epoch % checkpoint_every == 0:
                save_checkpoint(Checkpoint.from_state(state), Path(out_dir) / f"checkpoint_epoch{state.epoch:03d}.ckpt")
    finally:
        if log_fh is not None:
            log_fh.close()
            tel_fh.close()
    if state.stopped:
        log.info("early stop after epoch %d (iteration %d)", state.epoch, state.iteration)
    return Checkpoint.from_state(state)


# --------------------------------------------------------------------------- checkpoints

def _optimizer_tensors(prefix: str, opt: torch.optim.Optimizer) -> tuple[dict, dict]:
    sd = opt.state_dict()
    tensors = {}
    for idx, st in sd["state"].items():
        for key, val in st.items():
            tensors[f"{prefix}.{idx}.{key}"] = torch.as_tensor(val, dtype=torch.float32).detach().clone()
    return tensors, {"param_groups": sd["param_groups"]}


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict  # name -> float32 tensor (network state dict)
    optim: dict  # name -> float32 tensor (Adam moments and step counts)
    optim_meta: dict
    epoch: int = 0
    iteration: int = 0
    rng_state: bytes = b""
    log_tail: Optional[dict] = None
    early_stop: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    @classmethod
    def from_state(cls, state: TrainState) -> "Checkpoint":
        params = {k: v.detach().clone() for k, v in state.nets.state_dict().items()}
        g_t, g_meta = _optimizer_tensors("opt_g", state.opt_g)
        d_t, d_meta = _optimizer_tensors("opt_d", state.opt_d)
        rng = json.dumps({"seed": state.config.seed, "epoch": state.epoch}).encode()
        return cls(
            config=TrainConfig.from_dict(state.config.to_dict()),
            params=params,
            optim={**g_t, **d_t},
            optim_meta={"opt_g": g_meta, "opt_d": d_meta},
            epoch=state.epoch,
            iteration=state.iteration,
            rng_state=rng,
            log_tail=state.log_tail.to_dict() if state.log_tail else None,
            early_stop={"best_val": state.best_val, "bad_rounds": state.bad_rounds, "stopped": state.stopped},
        )

    def build_nets(self) -> TagGANNets:
        nets = TagGANNets(self.config.arch)
        nets.load_state_dict(self.params)
        return nets.eval()

    def to_state(self) -> TrainState:
        cfg = TrainConfig.from_dict(self.config.to_dict())
        state = new_state(cfg)
        state.nets.load_state_dict(self.params)
        for prefix, opt in (("opt_g", state.opt_g), ("opt_d", state.opt_d)):
            sd = opt.state_dict()
            restored: dict = {}
            for name, val in self.optim.items():
                pfx, idx, key = name.split(".", 2)
                if pfx == prefix:
                    restored.setdefault(int(idx), {})[key] = val.clone()
            sd["state"] = restored
            sd["param_groups"] = self.optim_meta[prefix]["param_groups"]
            opt.load_state_dict(sd)
        state.epoch, state.iteration = self.epoch, self.iteration
        state.best_val = self.early_stop.get("best_val")
        state.bad_rounds = self.early_stop.get("bad_rounds", 0)
        state.stopped = self.early_stop.get("stopped", False)
        state.log_tail = LossReport(**self.log_tail) if self.log_tail else None
        return state


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Layout: magic, u32 version, u32 header length, JSON header, then per tensor
    a u64 byte length and raw little-endian float32 data, then an 8-byte BLAKE2b checksum."""
    path = Path(path)
    names = {"params": list(ckpt.params), "optim": list(ckpt.optim)}
    shapes = {k: list(v.shape) for k, v in {**ckpt.params, **ckpt.optim}.items()}
    header = {
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "iteration": ckpt.iteration,
        "rng_state": base64.b64encode(ckpt.rng_state).decode("ascii"),
        "log_tail": ckpt.log_tail,
        "early_stop": ckpt.early_stop,
        "optim_meta": ckpt.optim_meta,
        "tensors": names,
        "shapes": shapes,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", ckpt.version, len(hbytes)))
    buf.write(hbytes)
    for group in ("params", "optim"):
        for name in names[group]:
            t = getattr(ckpt, group)[name]
            blob = t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
            buf.write(struct.pack("<Q", len(blob)))
            buf.write(blob)
    payload = buf.getvalue()
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload + digest)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < len(CHECKPOINT_MAGIC) + 16 or not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic or truncated)")
    payload, digest = raw[:-8], raw[-8:]
    if hashlib.blake2b(payload, digest_size=8).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")
    pos = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<II", payload, pos)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos += 8
    header = json.loads(payload[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    groups: dict[str, dict] = {"params": {}, "optim": {}}
    for group in ("params", "optim"):
        for name in header["tensors"][group]:
            (n,) = struct.unpack_from("<Q", payload, pos)
            pos += 8
            arr = np.frombuffer(payload[pos:pos + n], dtype="<f4").reshape(header["shapes"][name])
            pos += n
            groups[group][name] = torch.from_numpy(arr.astype(np.float32))
    if pos != len(payload):
        raise CheckpointError(f"{path}: trailing bytes after tensor data")
    return Checkpoint(
        config=TrainConfig.from_dict(header["config"]),
        params=groups["params"],
        optim=groups["optim"],
        optim_meta=header["optim_meta"],
        epoch=header["epoch"],
        iteration=header["iteration"],
        rng_state=base64.b64decode(header["rng_state"]),
        log_tail=header["log_tail"],
        early_stop=header["early_stop"],
        version=version,
    )
