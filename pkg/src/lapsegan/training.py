"""Adam optimization, the two-stage training loops, and checkpointing.

Stage 1 alternates a discriminator step on real vs generated clips with a
generator step on the adversarial plus content objective. Stage 2 follows
the refine procedure exactly: the discriminator ascends
mean[log D(Y) + log(1 - D(G2(Y1)))] + lambda * rank (via Adam on the negated
objective) and the generator descends
mean[log(1 - D(G2(Y1)))] + lambda * rank + content, with the stage-1
generator bitwise frozen throughout. Batches are drawn from a stateless
per-epoch shuffle keyed by (seed, epoch), so a resumed run replays the
exact stream of an uninterrupted one.
"""
from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, config_from_dict
from .data import CLIP_LEN, load_batch
from .errors import ConfigError, IntegrityError, UnsupportedVersionError
from .losses import (LossReport, adversarial_terms, content_loss,
                     generator_adversarial, gram, rank_loss_total,
                     stage1_objective, stage2_objective)
from .models import (build_discriminator, build_generator, duplicate_frame,
                     forward_discriminator, forward_generator)
from .ops import ParameterSet, init_parameters
from .tensor import Tensor, backward, no_grad, read_array, write_array

CHECKPOINT_MAGIC = b"MDCK"
CHECKPOINT_VERSION = 1

_INIT_TAG = 0x494E4954  # salts per-network init seeds


class TrainingDiverged(RuntimeError):
    """A loss or gradient went non-finite; the iteration was aborted."""


@dataclass
class AdamState:
    """First/second moment estimates plus step counter for one network."""

    m: dict
    v: dict
    t: int
    beta1: float
    beta2: float
    eps: float
    lr: float

    @classmethod
    def fresh(cls, params, cfg):
        zeros = {k: np.zeros_like(t.values) for k, t in params.tensors.items()}
        return cls(m=zeros, v={k: z.copy() for k, z in zeros.items()}, t=0,
                   beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps, lr=cfg.lr)


def adam_step(params, grads, state):
    """One bias-corrected Adam update, in place on the parameter values.

    ``grads`` maps parameter names to arrays; parameters absent from it
    receive a zero gradient. Non-finite gradients abort the iteration.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, tensor in params.tensors.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(tensor.values)
        elif not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / m.dtype.type(c1)
        vhat = v / v.dtype.type(c2)
        tensor.values -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(
            tensor.values.dtype)


def _grads_of(params):
    return {k: t.grad for k, t in params.tensors.items() if t.grad is not None}


# -- checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    """Everything needed to resume or run a training stage."""

    stage: int
    iteration: int
    config: dict
    params: dict            # net name -> ParameterSet
    adam: dict = field(default_factory=dict)  # net name -> AdamState
    rng_state: dict = field(default_factory=dict)

    def run_config(self) -> RunConfig:
        return config_from_dict(self.config)


def save_checkpoint(ckpt, path):
    """Write magic, version, CRC32 of the payload, then the payload: a JSON
    meta block and named tensor blocks in the binary tensor format."""
    meta = {
        "stage": ckpt.stage,
        "iteration": ckpt.iteration,
        "config": ckpt.config,
        "rng_state": ckpt.rng_state,
        "adam": {net: {"t": st.t, "beta1": st.beta1, "beta2": st.beta2,
                       "eps": st.eps, "lr": st.lr}
                 for net, st in ckpt.adam.items()},
    }
    body = io.BytesIO()
    meta_raw = json.dumps(meta, sort_keys=True).encode()
    body.write(struct.pack("<I", len(meta_raw)))
    body.write(meta_raw)

    blocks = []
    for net in sorted(ckpt.params):
        ps = ckpt.params[net]
        for name in sorted(ps.tensors):
            blocks.append((f"{net}/param/{name}", ps.tensors[name].values))
        for name in sorted(ps.buffers):
            blocks.append((f"{net}/buffer/{name}", ps.buffers[name]))
    for net in sorted(ckpt.adam):
        st = ckpt.adam[net]
        for name in sorted(st.m):
            blocks.append((f"{net}/adam_m/{name}", st.m[name]))
            blocks.append((f"{net}/adam_v/{name}", st.v[name]))
    body.write(struct.pack("<I", len(blocks)))
    for name, arr in blocks:
        raw = name.encode()
        body.write(struct.pack("<H", len(raw)))
        body.write(raw)
        write_array(body, arr)

    payload = body.getvalue()
    with open(path, "wb") as fp:
        fp.write(CHECKPOINT_MAGIC)
        fp.write(struct.pack("<I", CHECKPOINT_VERSION))
        fp.write(struct.pack("<I", zlib.crc32(payload)))
        fp.write(payload)
    return path


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint (bad magic)")
    version, = struct.unpack("<I", raw[4:8])
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(
            f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    crc, = struct.unpack("<I", raw[8:12])
    payload = raw[12:]
    if zlib.crc32(payload) != crc:
        raise IntegrityError(f"{path}: checksum mismatch (corrupt or truncated)")

    body = io.BytesIO(payload)
    meta_len, = struct.unpack("<I", body.read(4))
    meta = json.loads(body.read(meta_len).decode())
    n_blocks, = struct.unpack("<I", body.read(4))
    params, adam_arrays = {}, {}
    for _ in range(n_blocks):
        name_len, = struct.unpack("<H", body.read(2))
        name = body.read(name_len).decode()
        arr = read_array(body)
        net, kind, pname = name.split("/", 2)
        if kind == "param":
            ps = params.setdefault(net, ParameterSet())
            ps.tensors[pname] = Tensor(arr, requires_grad=True)
        elif kind == "buffer":
            params.setdefault(net, ParameterSet()).buffers[pname] = arr
        else:
            adam_arrays.setdefault(net, {}).setdefault(kind, {})[pname] = arr

    adam = {}
    for net, scalars in meta.get("adam", {}).items():
        arrs = adam_arrays.get(net, {})
        adam[net] = AdamState(m=arrs.get("adam_m", {}), v=arrs.get("adam_v", {}),
                              t=scalars["t"], beta1=scalars["beta1"],
                              beta2=scalars["beta2"], eps=scalars["eps"],
                              lr=scalars["lr"])
    return Checkpoint(stage=meta["stage"], iteration=meta["iteration"],
                      config=meta["config"], params=params, adam=adam,
                      rng_state=meta.get("rng_state", {}))


# -- shared training plumbing -------------------------------------------------


def _init_seed(cfg, tag):
    return np.random.SeedSequence(entropy=cfg.seed, spawn_key=(_INIT_TAG, tag))


def _master_rng_state(cfg):
    gen = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed))
    state = gen.bit_generator.state
    return {"bit_generator": state["bit_generator"],
            "state": {k: int(v) for k, v in state["state"].items()},
            "has_uint32": int(state["has_uint32"]),
            "uinteger": int(state["uinteger"])}


def _check_finite(name, *tensors):
    for t in tensors:
        if not np.all(np.isfinite(t.values)):
            raise TrainingDiverged(f"non-finite {name}")


class _RunWriter:
    """losses.csv rows, progress lines, and periodic checkpoints."""

    def __init__(self, out_dir, cfg, stage, append=False):
        self.cfg = cfg
        self.stage = stage
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.csv = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            path = self.out_dir / "losses.csv"
            header = not (append and path.exists())
            self.csv = open(path, "a" if append else "w")
            if header:
                self.csv.write(LossReport.CSV_HEADER + "\n")

    def report(self, rep):
        rep.check_totals()
        if self.csv is not None:
            self.csv.write(rep.csv_row() + "\n")
            self.csv.flush()
        if rep.iteration % self.cfg.log_every == 0:
            print(f"iter={rep.iteration} adv_d={rep.adv_d:.6f} "
                  f"adv_g={rep.adv_g:.6f} content={rep.content:.6f} "
                  f"rank={rep.rank:.6f}", flush=True)

    def maybe_checkpoint(self, ckpt, final=False):
        if self.out_dir is None:
            return None
        due = final or ckpt.iteration % self.cfg.checkpoint_every == 0
        if not due:
            return None
        tag = "final" if final else f"iter{ckpt.iteration:06d}"
        return save_checkpoint(ckpt, self.out_dir / f"stage{self.stage}_{tag}.mdck")

    def close(self):
        if self.csv is not None:
            self.csv.close()


# -- stage 1 ------------------------------------------------------------------


def train_stage1(store, cfg, out_dir=None, resume=None):
    """Alternating content-stage training over a clip store's train split.

    Returns (final Checkpoint, list of LossReports). ``resume`` continues a
    saved stage-1 checkpoint to ``cfg.iterations`` total iterations.
    """
    cfg.validate()
    if not store.split_records("train"):
        raise ConfigError("store has no train clips")
    g_spec = build_generator(1, cfg.resolution, cfg.width_multiplier)
    d_spec = build_discriminator(cfg.resolution, cfg.width_multiplier)

    if resume is not None:
        if resume.stage != 1:
            raise ConfigError(f"expected a stage-1 checkpoint, got stage {resume.stage}")
        g_params, d_params = resume.params["g1"], resume.params["d1"]
        adam_g, adam_d = resume.adam["g1"], resume.adam["d1"]
        start = resume.iteration
    else:
        g_params = init_parameters(g_spec, _init_seed(cfg, 1))
        d_params = init_parameters(d_spec, _init_seed(cfg, 2))
        adam_g, adam_d = AdamState.fresh(g_params, cfg), AdamState.fresh(d_params, cfg)
        start = 0

    writer = _RunWriter(out_dir, cfg, stage=1, append=resume is not None)
    bn = dict(bn_eps=cfg.bn_eps, bn_momentum=cfg.bn_momentum)
    reports = []
    ckpt = None
    try:
        for it in range(start, cfg.iterations):
            # (a) discriminator on real vs generated, generator frozen
            d_params.zero_grad()
            y, x = load_batch(store, "train", cfg.batch_size, cfg.seed, 2 * it)
            with no_grad():
                y1 = forward_generator(g_spec, g_params, x, **bn).video
            d_real, _ = forward_discriminator(d_spec, d_params, y, **bn)
            d_fake, _ = forward_discriminator(d_spec, d_params, y1, **bn)
            loss_d, _ = adversarial_terms(d_real, d_fake, cfg.adv_form)
            _check_finite("discriminator loss", loss_d)
            backward(loss_d)
            adam_step(d_params, _grads_of(d_params), adam_d)
            d_params.zero_grad()

            # (b) generator on a fresh batch, discriminator frozen
            g_params.zero_grad()
            d_params.zero_grad()
            y, x = load_batch(store, "train", cfg.batch_size, cfg.seed, 2 * it + 1)
            y1 = forward_generator(g_spec, g_params, x, **bn).video
            d_fake, _ = forward_discriminator(d_spec, d_params, y1, **bn)
            adv_g = generator_adversarial(d_fake, cfg.adv_form)
            l_con = content_loss(y, y1, cfg.loss_reduction)
            total_g = adv_g + l_con
            _check_finite("generator loss", total_g)
            backward(total_g)
            adam_step(g_params, _grads_of(g_params), adam_g)
            g_params.zero_grad()
            d_params.zero_grad()

            rep = stage1_objective(loss_d.item(), adv_g.item(), l_con.item(),
                                   iteration=it + 1)
            reports.append(rep)
            writer.report(rep)
            ckpt = Checkpoint(stage=1, iteration=it + 1, config=cfg.as_dict(),
                              params={"g1": g_params, "d1": d_params},
                              adam={"g1": adam_g, "d1": adam_d},
                              rng_state=_master_rng_state(cfg))
            writer.maybe_checkpoint(ckpt)
        if ckpt is not None:
            writer.maybe_checkpoint(ckpt, final=True)
    finally:
        writer.close()
    return ckpt, reports


# -- stage 2 ------------------------------------------------------------------


def _gram_triples(cfg, taps, feats_y1, feats_y2, feats_real):
    triples = []
    for name, f1, f2, fr in zip(taps, feats_y1, feats_y2, feats_real):
        triples.append((gram(f1, name, cfg.gram_batch_mean),
                        gram(f2, name, cfg.gram_batch_mean),
                        gram(fr, name, cfg.gram_batch_mean)))
    return triples


def stage2_d_objective(nets, y, x, cfg, update_running=True):
    """The discriminator's ascent objective on one batch:
    mean[log D(Y) + log(1 - D(G2(Y1)))] + lambda * rank. Returns
    (objective, adv_loss_d, rank) tensors; gradients flow only into D2."""
    g1_spec, g1_params, g2_spec, g2_params, d_spec, d_params = nets
    bn = dict(bn_eps=cfg.bn_eps, bn_momentum=cfg.bn_momentum)
    taps = cfg.tap_names(d_spec)
    with no_grad():
        y1 = forward_generator(g1_spec, g1_params, x, update_running=False, **bn).video
        y2 = forward_generator(g2_spec, g2_params, y1,
                               update_running=update_running, **bn).video
    d_real, feats_real = forward_discriminator(d_spec, d_params, y,
                                               update_running=update_running, **bn)
    d_fake, feats_y2 = forward_discriminator(d_spec, d_params, y2,
                                             update_running=update_running, **bn)
    _, feats_y1 = forward_discriminator(d_spec, d_params, y1,
                                        update_running=update_running, **bn)
    loss_d, _ = adversarial_terms(d_real, d_fake, cfg.adv_form)
    rank = rank_loss_total(_gram_triples(cfg, taps, feats_y1, feats_y2, feats_real))
    objective = -loss_d + cfg.lambda_rank * rank
    return objective, loss_d, rank


def stage2_g_objective(nets, y, x, cfg, update_running=True):
    """The generator's descent objective on one batch:
    mean[log(1 - D(G2(Y1)))] + lambda * rank + content. Returns
    (objective, adv_g, rank, content) tensors; gradients flow only into G2."""
    g1_spec, g1_params, g2_spec, g2_params, d_spec, d_params = nets
    bn = dict(bn_eps=cfg.bn_eps, bn_momentum=cfg.bn_momentum)
    taps = cfg.tap_names(d_spec)
    with no_grad():
        y1 = forward_generator(g1_spec, g1_params, x, update_running=False, **bn).video
        _, feats_real = forward_discriminator(d_spec, d_params, y,
                                              update_running=update_running, **bn)
        _, feats_y1 = forward_discriminator(d_spec, d_params, y1,
                                            update_running=update_running, **bn)
    y2 = forward_generator(g2_spec, g2_params, y1,
                           update_running=update_running, **bn).video
    d_fake, feats_y2 = forward_discriminator(d_spec, d_params, y2,
                                             update_running=update_running, **bn)
    adv_g = generator_adversarial(d_fake, cfg.adv_form)
    rank = rank_loss_total(_gram_triples(cfg, taps, feats_y1, feats_y2, feats_real))
    l_con = content_loss(y, y2, cfg.loss_reduction)
    objective = adv_g + cfg.lambda_rank * rank + l_con
    return objective, adv_g, rank, l_con


def _clone_from_g1(g1_params):
    return g1_params.clone()


def train_stage2(store, cfg, g1_checkpoint, out_dir=None, resume=None):
    """Refine-stage training per the two-phase procedure, with the stage-1
    generator frozen. ``g1_checkpoint`` supplies the trained stage-1
    parameters; G2 starts from them (identical shapes) unless
    ``cfg.g2_init`` asks for a fresh draw."""
    cfg.validate()
    if g1_checkpoint is None:
        raise ConfigError("stage 2 requires a stage-1 checkpoint")
    if not store.split_records("train"):
        raise ConfigError("store has no train clips")
    ck_cfg = g1_checkpoint.run_config()
    if (ck_cfg.resolution, ck_cfg.width_multiplier) != \
            (cfg.resolution, cfg.width_multiplier):
        raise ConfigError(
            "stage-1 checkpoint geometry "
            f"(res {ck_cfg.resolution}, width {ck_cfg.width_multiplier}) does not "
            f"match config (res {cfg.resolution}, width {cfg.width_multiplier})")
    if "g1" not in g1_checkpoint.params:
        raise ConfigError("checkpoint carries no stage-1 generator parameters")

    g1_spec = build_generator(1, cfg.resolution, cfg.width_multiplier)
    g2_spec = build_generator(2, cfg.resolution, cfg.width_multiplier)
    d_spec = build_discriminator(cfg.resolution, cfg.width_multiplier)
    g1_params = g1_checkpoint.params["g1"]
    for t in g1_params.tensors.values():
        t.requires_grad = False  # frozen: nothing may write a gradient into G1
        t.grad = None

    if resume is not None:
        if resume.stage != 2:
            raise ConfigError(f"expected a stage-2 checkpoint, got stage {resume.stage}")
        g2_params, d_params = resume.params["g2"], resume.params["d2"]
        adam_g, adam_d = resume.adam["g2"], resume.adam["d2"]
        start = resume.iteration
    else:
        if cfg.g2_init == "g1":
            g2_params = _clone_from_g1(g1_params)
        else:
            g2_params = init_parameters(g2_spec, _init_seed(cfg, 3))
        d_params = init_parameters(d_spec, _init_seed(cfg, 4))
        adam_g, adam_d = AdamState.fresh(g2_params, cfg), AdamState.fresh(d_params, cfg)
        start = 0

    nets = (g1_spec, g1_params, g2_spec, g2_params, d_spec, d_params)
    writer = _RunWriter(out_dir, cfg, stage=2, append=resume is not None)
    reports = []
    ckpt = None
    try:
        for it in range(start, cfg.iterations):
            # (a) discriminator ascends: Adam on the negated objective
            d_params.zero_grad()
            y, x = load_batch(store, "train", cfg.batch_size, cfg.seed, 2 * it)
            objective, loss_d, _ = stage2_d_objective(nets, y, x, cfg)
            _check_finite("discriminator objective", objective)
            backward(-objective)
            adam_step(d_params, _grads_of(d_params), adam_d)
            d_params.zero_grad()

            # (b) generator descends on a fresh batch
            g2_params.zero_grad()
            d_params.zero_grad()
            y, x = load_batch(store, "train", cfg.batch_size, cfg.seed, 2 * it + 1)
            total_g, adv_g, rank_g, l_con = stage2_g_objective(nets, y, x, cfg)
            _check_finite("generator objective", total_g)
            backward(total_g)
            adam_step(g2_params, _grads_of(g2_params), adam_g)
            g2_params.zero_grad()
            d_params.zero_grad()

            rep = stage2_objective(loss_d.item(), adv_g.item(), l_con.item(),
                                   rank_g.item(), lam=cfg.lambda_rank,
                                   iteration=it + 1)
            reports.append(rep)
            writer.report(rep)
            ckpt = Checkpoint(stage=2, iteration=it + 1, config=cfg.as_dict(),
                              params={"g1": g1_params, "g2": g2_params,
                                      "d2": d_params},
                              adam={"g2": adam_g, "d2": adam_d},
                              rng_state=_master_rng_state(cfg))
            writer.maybe_checkpoint(ckpt)
        if ckpt is not None:
            writer.maybe_checkpoint(ckpt, final=True)
    finally:
        writer.close()
    return ckpt, reports


# -- generation ---------------------------------------------------------------


def generate_video(ckpt, first_frame):
    """Run the stage pipeline recorded in a checkpoint on a normalized
    (N,3,H,W) frame: duplicate to 32 frames, apply G1, then G2 if present."""
    cfg = ckpt.run_config()
    res = cfg.resolution
    if tuple(first_frame.shape[1:]) != (3, res, res):
        raise ConfigError(
            f"frame shape {first_frame.shape[1:]} does not match checkpoint "
            f"resolution {res}")
    mode = "inference" if cfg.generation_bn_mode == "running" else "train"
    bn = dict(mode=mode, update_running=False,
              bn_eps=cfg.bn_eps, bn_momentum=cfg.bn_momentum)
    with no_grad():
        x = duplicate_frame(first_frame, CLIP_LEN)
        g1_spec = build_generator(1, res, cfg.width_multiplier)
        video = forward_generator(g1_spec, ckpt.params["g1"], x, **bn).video
        if ckpt.stage == 2:
            g2_spec = build_generator(2, res, cfg.width_multiplier)
            video = forward_generator(g2_spec, ckpt.params["g2"], video, **bn).video
    return video
