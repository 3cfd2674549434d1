"""Offline training loop, zero-shot evaluation, checkpoints and metrics."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import struct
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, adam_step, clip_grad_norm
from .config import TrainConfig, config_from_dict
from .dataset import (Batch, DatasetStore, ShiftConfig, generate_expert_dataset, goal_coverage,
                      make_shift, sample_batch, sample_goal, sample_start, save_dataset)
from .latent import align_targets, encode_state, model_loss_terms
from .maze import EnvConfig, MazeSpec, default_maze, load_maze, normalized_score, parse_maze, format_maze
from .model import ModelBundle
from .policy import hierarchical_controller, run_episodes, sg_loss_terms
from .rollout import RolloutConfig, RolloutStats, run_iteration_rollouts
from .skills import encode_skill, prior_loss, reconstruction_term, skill_kl_term

log = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "GLVSA_OUTPUT_DIR"
SHIFT_LEVELS = ("none", "small", "medium", "large")


class TrainingDiverged(RuntimeError):
    pass


class CheckpointVersionError(RuntimeError):
    pass


class CheckpointCorruptError(RuntimeError):
    pass


def default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_DIR_ENV, "runs"))


def maze_for(cfg: TrainConfig) -> MazeSpec:
    return load_maze(cfg.maze_file) if cfg.maze_file else default_maze()


def shift_for(cfg: TrainConfig, spec: MazeSpec, level: str) -> ShiftConfig:
    return make_shift(spec, level, tuple(cfg.anchor), cfg.train_fraction, cfg.eval_fraction)


# -- joint loss ----------------------------------------------------------------


def loss_components(bundle: ModelBundle, batch: Batch, noise_z, noise_sg):
    """The four offline losses plus their sub-terms, all as graph tensors."""
    cfg = bundle.cfg
    dtype = bundle["state_encoder"].dtype
    states = batch.states.astype(dtype)
    actions = batch.actions.astype(dtype)
    z, q = encode_skill(bundle["skill_encoder"], bundle.norm, (states, actions), noise_z)
    recon_a = reconstruction_term(bundle["skill_decoder"], bundle.norm, states, actions, z,
                                  bundle.spec.action_bound)
    kl_skill = skill_kl_term(q)
    h_t = encode_state(bundle["state_encoder"], bundle.norm, states[:, 0])
    model = model_loss_terms(bundle, states, z, q)
    sg = sg_loss_terms(bundle, states, batch.goals.astype(dtype), noise_sg, q)
    comps = OrderedDict(
        skill=recon_a + kl_skill * cfg.beta,
        prior=prior_loss(bundle["skill_prior"], h_t, q),
        model=model["recon"] + model["flat"] + model["skill_step"] + model["inverse"],
        sg=sg["bc"] + sg["sanity"],
    )
    detail = OrderedDict(action_recon=recon_a, skill_kl=kl_skill, **{f"model_{k}": v for k, v in model.items()},
                         sg_bc=sg["bc"], sg_sanity=sg["sanity"])
    return comps, detail


def total_loss(bundle: ModelBundle, batch: Batch, noise_z, noise_sg) -> tuple[Tensor, "OrderedDict[str, Tensor]"]:
    cfg = bundle.cfg
    comps, _ = loss_components(bundle, batch, noise_z, noise_sg)
    total = (comps["skill"] * cfg.w_skill + comps["prior"] * cfg.w_prior
             + comps["model"] * cfg.w_model + comps["sg"] * cfg.w_sg)
    return total, comps


def draw_noise(bundle: ModelBundle, batch_size: int, rng: np.random.Generator):
    d_z = bundle.cfg.d_z
    return rng.standard_normal((batch_size, d_z)), rng.standard_normal((batch_size, d_z))


def train_step(bundle: ModelBundle, batch: Batch, rng: np.random.Generator) -> dict[str, float]:
    """One joint Adam step on every trainable module, then an EMA step on the target encoder."""
    noise_z, noise_sg = draw_noise(bundle, batch.size, rng)
    bundle.zero_grad()
    total, comps = total_loss(bundle, batch, noise_z, noise_sg)
    out = {k: float(v.data) for k, v in comps.items()}
    out["total"] = float(total.data)
    if not np.isfinite(out["total"]):
        return out
    total.backward()
    names = bundle.trainable()
    grads = [bundle[n].grads() for n in names]
    out["grad_norm"] = clip_grad_norm(grads, bundle.cfg.grad_clip)
    for n, g in zip(names, grads):
        adam_step(bundle[n], g, bundle.cfg.lr)
    align_targets(bundle)
    return out


# -- metrics -------------------------------------------------------------------

METRIC_COLUMNS = (
    "iteration", "epoch", "loss_skill", "loss_prior", "loss_model", "loss_sg", "loss_total",
    "goal_coverage", "n_trajectories", "n_synthetic",
    "rollouts_appended", "rollouts_rejected", "rollouts_truncated", "clamped_states",
    "score_none", "score_small", "score_medium", "score_large", "wall_clock",
)


@dataclass
class MetricsRecord:
    iteration: int
    epoch: int
    loss_skill: float | None = None
    loss_prior: float | None = None
    loss_model: float | None = None
    loss_sg: float | None = None
    loss_total: float | None = None
    goal_coverage: int | None = None
    n_trajectories: int | None = None
    n_synthetic: int | None = None
    rollouts_appended: int | None = None
    rollouts_rejected: int | None = None
    rollouts_truncated: int | None = None
    clamped_states: int | None = None
    score_none: float | None = None
    score_small: float | None = None
    score_medium: float | None = None
    score_large: float | None = None
    wall_clock: float | None = None


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_metrics(records, path) -> None:
    """Comma-separated metrics with a fixed header; same records give the same bytes."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in records:
        w.writerow([_fmt(getattr(r, c)) for c in METRIC_COLUMNS])
    Path(path).write_text(buf.getvalue())


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- checkpoints -----------------------------------------------------------------

_CKPT_MAGIC = b"GLVSACKP"
_CKPT_VERSION = 1


def save_checkpoint(bundle: ModelBundle, path) -> None:
    """Magic, version, JSON manifest of (name, shape, offset), little-endian float32 payload."""
    entries = []
    chunks = []
    offset = 0
    steps = {}
    for mod, params in bundle.modules.items():
        steps[mod] = params.step
        for name, t in params.items():
            for suffix, arr in (("", t.data), ("#m", params.m[name]), ("#v", params.v[name])):
                raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
                entries.append([f"{mod}/{name}{suffix}", list(arr.shape), offset])
                chunks.append(raw)
                offset += len(raw)
    header = {
        "config_hash": bundle.cfg.architecture_hash(),
        "config": bundle.cfg.to_dict(),
        "maze": format_maze(bundle.spec),
        "iteration": bundle.iteration,
        "adam_steps": steps,
        "tensors": entries,
        "payload_bytes": offset,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path, expected: TrainConfig | None = None) -> ModelBundle:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != _CKPT_MAGIC:
        raise CheckpointCorruptError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != _CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {_CKPT_VERSION}")
    if len(raw) < 16 + hlen:
        raise CheckpointCorruptError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:16 + hlen])
    except ValueError as exc:
        raise CheckpointCorruptError(f"{path}: unreadable header") from exc
    payload = raw[16 + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointCorruptError(f"{path}: payload has {len(payload)} bytes, expected {header['payload_bytes']}")
    cfg = config_from_dict(header["config"])
    if cfg.architecture_hash() != header["config_hash"]:
        raise CheckpointVersionError(f"{path}: config hash does not match stored config")
    if expected is not None and expected.architecture_hash() != header["config_hash"]:
        raise CheckpointVersionError(f"{path}: checkpoint was written for a different model configuration")
    bundle = ModelBundle(cfg, parse_maze(header["maze"]))
    bundle.iteration = header["iteration"]
    lookup = {name: (shape, off) for name, shape, off in header["tensors"]}
    for mod, params in bundle.modules.items():
        if mod not in header["adam_steps"]:
            raise CheckpointVersionError(f"{path}: module {mod} missing")
        params.step = header["adam_steps"][mod]
        for name, t in params.items():
            for suffix in ("", "#m", "#v"):
                shape, off = lookup[f"{mod}/{name}{suffix}"]
                n = int(np.prod(shape)) * 4
                arr = np.frombuffer(payload[off:off + n], dtype="<f4").reshape(shape).astype(np.float32)
                if suffix == "":
                    t.data = arr
                elif suffix == "#m":
                    params.m[name] = arr
                else:
                    params.v[name] = arr
    return bundle


# -- offline training --------------------------------------------------------------


@dataclass
class TrainResult:
    bundle: ModelBundle
    store: DatasetStore
    metrics: list = field(default_factory=list)
    rollouts: list = field(default_factory=list)
    coverage: list = field(default_factory=list)  # coverage after 0, 1, ... iterations


def build_expert_store(cfg: TrainConfig, spec: MazeSpec | None = None) -> DatasetStore:
    spec = spec or maze_for(cfg)
    store = generate_expert_dataset(spec, shift_for(cfg, spec, "none"), cfg.n_expert, cfg.data_seed,
                                    horizon=cfg.H, env_cfg=EnvConfig(cfg.gamma, cfg.horizon))
    store.synthetic_fraction = cfg.synthetic_fraction
    return store


def train_offline(cfg: TrainConfig, store: DatasetStore | None = None, out_dir=None,
                  resume: tuple | None = None, progress=None) -> TrainResult:
    """Iterate joint training and model-guided rollouts.

    ``resume`` is ``(bundle, store)`` as saved at the end of some iteration;
    training continues from ``bundle.iteration``. With ``out_dir`` a
    checkpoint, dataset snapshot and the metrics file are written after every
    iteration.
    """
    t0 = time.perf_counter()
    if resume is not None:
        bundle, store = resume
        store = store.copy()
    else:
        spec = maze_for(cfg)
        bundle = ModelBundle(cfg, spec, seed=cfg.seed)
        store = build_expert_store(cfg, spec) if store is None else store.copy()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = TrainResult(bundle, store)
    result.coverage.append(goal_coverage(store, cfg.coverage_bin))
    rcfg = RolloutConfig(cfg.branches, cfg.skills_per_rollout, True, cfg.seed, cfg.max_clamped_fraction)
    for it in range(bundle.iteration, cfg.iterations):
        rng = np.random.default_rng([cfg.seed, it])
        for epoch in range(cfg.epochs):
            sums: dict[str, float] = {}
            for _ in range(cfg.batches_per_epoch):
                batch = sample_batch(store, cfg.H, cfg.batch_size, rng, cfg.goal_mode)
                vals = train_step(bundle, batch, rng)
                if not np.isfinite(vals["total"]):
                    if out is not None:
                        save_checkpoint(bundle, out / f"diverged_iter{it}_epoch{epoch}.ckpt")
                    raise TrainingDiverged(f"non-finite loss at iteration {it}, epoch {epoch}: {vals}")
                for k, v in vals.items():
                    sums[k] = sums.get(k, 0.0) + v
            n = cfg.batches_per_epoch
            counts = store.counts()
            rec = MetricsRecord(
                it, epoch, sums["skill"] / n, sums["prior"] / n, sums["model"] / n, sums["sg"] / n,
                sums["total"] / n, n_trajectories=len(store), n_synthetic=counts["synthetic"],
                wall_clock=round(time.perf_counter() - t0, 3),
            )
            result.metrics.append(rec)
            if progress is not None:
                progress(rec)
        if cfg.branches > 0:
            stats = run_iteration_rollouts(bundle, store, rcfg, it, cfg.coverage_bin)
        else:
            cov = goal_coverage(store, cfg.coverage_bin)
            stats = RolloutStats(it, coverage_before=cov, coverage_after=cov)
        result.rollouts.append(stats)
        result.coverage.append(stats.coverage_after)
        last = result.metrics[-1]
        last.goal_coverage = stats.coverage_after
        last.n_trajectories = len(store)
        last.n_synthetic = store.counts()["synthetic"]
        last.rollouts_appended = stats.appended
        last.rollouts_rejected = stats.rejected
        last.rollouts_truncated = stats.truncated
        last.clamped_states = stats.clamped_states
        bundle.iteration = it + 1
        if cfg.eval_episodes > 0:
            for lv, rep in eval_all_shifts(bundle).items():
                setattr(last, f"score_{lv}", rep.mean)
        log.info("iteration %d done: loss %.4f, coverage %d -> %d, %d synthetic appended",
                 it, result.metrics[-1].loss_total, stats.coverage_before, stats.coverage_after, stats.appended)
        if out is not None:
            save_checkpoint(bundle, out / f"iter{it + 1}.ckpt")
            save_dataset(store, out / f"iter{it + 1}.data")
            emit_metrics(result.metrics, out / "metrics.csv")
    return result


# -- evaluation -------------------------------------------------------------------


@dataclass
class EvalReport:
    shift: str
    episodes: int
    mean: float | None
    std: float | None
    scores: list = field(default_factory=list)

    @property
    def status(self) -> str:
        return "no data" if self.episodes == 0 else "ok"

    def __str__(self) -> str:
        if self.episodes == 0:
            return f"{self.shift}: no data"
        return f"{self.shift}: {self.mean:.1f} +/- {self.std:.1f} over {self.episodes} episodes"


def eval_tasks(spec: MazeSpec, shift: ShiftConfig, episodes: int, seed: int):
    rng = np.random.default_rng(seed)
    goals, starts = [], []
    for _ in range(episodes):
        g = sample_goal(spec, list(shift.eval_cells), rng)
        goals.append(g)
        starts.append(sample_start(spec, g, rng))
    return np.array(starts, dtype=np.float32).reshape(-1, 2), np.array(goals, dtype=np.float32).reshape(-1, 2)


def eval_zeroshot(bundle: ModelBundle, shift: ShiftConfig, episodes: int, seed: int,
                  horizon: int | None = None, controller=None) -> EvalReport:
    """Mean/std normalized score over ``episodes`` eval-region goals, no updates."""
    name = shift.level.value
    if episodes == 0:
        return EvalReport(name, 0, None, None, [])
    starts, goals = eval_tasks(bundle.spec, shift, episodes, seed)
    controller = controller or hierarchical_controller(bundle)
    out = run_episodes(bundle.spec, controller, starts, goals, horizon or bundle.cfg.horizon)
    scores = [normalized_score(p, g) for p, g in zip(out["final_pos"], goals)]
    return EvalReport(name, episodes, float(np.mean(scores)), float(np.std(scores)), scores)


def eval_all_shifts(bundle: ModelBundle, episodes: int | None = None, seed: int | None = None,
                    levels=SHIFT_LEVELS) -> dict[str, EvalReport]:
    cfg = bundle.cfg
    return {
        lv: eval_zeroshot(bundle, shift_for(cfg, bundle.spec, lv),
                          cfg.eval_episodes if episodes is None else episodes,
                          cfg.eval_seed if seed is None else seed)
        for lv in levels
    }
