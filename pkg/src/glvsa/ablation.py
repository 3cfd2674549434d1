"""Named ablation arms and a small runner that trains and scores each of them."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .config import TrainConfig
from .trainer import SHIFT_LEVELS, build_expert_store, eval_all_shifts, maze_for, train_offline

ABLATIONS = ("no-rollout", "no-skill-step-dynamics", "no-goal-generator", "bc-only", "h-sweep")
H_SWEEP_DEFAULT = (1, 5, 10, 40)


def arm_config(cfg: TrainConfig, name: str, value=None) -> TrainConfig:
    """Config of one ablation arm; every other setting is left untouched."""
    if name == "full":
        return cfg
    if name == "no-rollout":
        return cfg.replace(branches=0)
    if name == "no-skill-step-dynamics":
        return cfg.replace(skill_step_dynamics=False)
    if name == "no-goal-generator":
        return cfg.replace(goal_generator=False)
    if name == "bc-only":
        return cfg.replace(sanity_check=False)
    if name == "h-sweep":
        if value is None:
            raise ValueError("h-sweep needs an H value")
        return cfg.replace(H=int(value))
    raise ValueError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}")


@dataclass
class ArmResult:
    arm: str
    seed: int
    scores: dict = field(default_factory=dict)   # shift -> mean score
    coverage: list = field(default_factory=list)


def arms_for(name: str, values=None) -> list[tuple[str, object]]:
    if name == "h-sweep":
        return [(f"H={int(v)}", int(v)) for v in (values or H_SWEEP_DEFAULT)]
    arm_config(TrainConfig(), name)  # validates the name
    return [("full", None), (name, None)]


def run_ablation(cfg: TrainConfig, name: str, values=None, seeds=None, out_dir=None,
                 episodes: int | None = None, levels=SHIFT_LEVELS, progress=None) -> list[ArmResult]:
    """Train and evaluate every arm of ``name`` for every seed.

    The expert dataset depends only on ``data_seed`` and ``H``, so arms with
    the same H share it.
    """
    seeds = [cfg.seed] if seeds is None else list(seeds)
    spec = maze_for(cfg)
    stores = {}
    results = []
    for label, value in arms_for(name, values):
        base = arm_config(cfg, "full" if label == "full" else name, value)
        for seed in seeds:
            arm_cfg = base.replace(seed=seed)
            arm_cfg.validate()
            if arm_cfg.H not in stores:
                stores[arm_cfg.H] = build_expert_store(arm_cfg, spec)
            run_dir = None if out_dir is None else Path(out_dir) / f"{label}_seed{seed}"
            res = train_offline(arm_cfg, store=stores[arm_cfg.H], out_dir=run_dir)
            reports = eval_all_shifts(res.bundle, episodes, levels=levels)
            row = ArmResult(label, seed, {lv: r.mean for lv, r in reports.items()}, res.coverage)
            results.append(row)
            if progress is not None:
                progress(row)
    return results


def format_table(results: list[ArmResult]) -> str:
    if not results:
        return "arm,seed\n"
    levels = list(results[0].scores)
    lines = [",".join(["arm", "seed", *levels, "final_coverage"])]
    for r in results:
        cells = ["nan" if r.scores[lv] is None else f"{r.scores[lv]:.1f}" for lv in levels]
        lines.append(",".join([r.arm, str(r.seed), *cells, str(r.coverage[-1] if r.coverage else "")]))
    return "\n".join(lines) + "\n"
