"""Command-line front end wiring the modules into reproducible runs.

Every command resolves its parameters (flags beat config files beat
defaults), writes a `resolved_config.json` capturing them, and emits CSV /
JSON artifacts under its output directory. Matrices use 17-significant-digit
CSV so outputs diff cleanly and reproduce byte for byte under a fixed seed.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import functools
import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import metrics, posttrain, synth
from .neural_ot import NotTrainConfig, load_ot_map, save_ot_map, train_not
from .costmatrix import CostWeights, PatchGrid, build_cost
from .sinkhorn import PartialOTConfig, solve_partial_ot

EXIT_DATA_ERROR = 3
EXIT_NUMERIC_ERROR = 4


def _resolve_seed(seed):
    """Explicit flag wins; PISCES_SEED is the fallback; default 0."""
    if seed is not None:
        return int(seed)
    env = os.environ.get("PISCES_SEED")
    return int(env) if env else 0


def _write_json(path: Path, payload: dict):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_resolved_config(out_dir: Path, command: str, params: dict):
    _write_json(out_dir / "resolved_config.json", {"command": command, **params})


def _save_matrix_csv(path: Path, matrix: np.ndarray):
    np.savetxt(path, np.atleast_2d(matrix), fmt="%.17g", delimiter=",")


def _load_matrix_csv(path) -> np.ndarray:
    try:
        m = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    except (ValueError, OSError) as exc:
        raise ValueError(f"malformed CSV matrix {path}: {exc}") from exc
    return m


def _out_dir(out) -> Path:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _exit_codes(fn):
    """Map data-shaped failures to exit 3 and numeric blowups to exit 4."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_DATA_ERROR)
        except (ArithmeticError, np.linalg.LinAlgError) as exc:
            click.echo(f"numeric failure: {exc}", err=True)
            sys.exit(EXIT_NUMERIC_ERROR)

    return wrapper


@click.group()
def main():
    """Optimal-transport-aligned reward toolkit."""


@main.command("sinkhorn")
@click.argument("cost_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--epsilon", default=0.05, show_default=True, help="Entropic temperature.")
@click.option("--mass", default=0.9, show_default=True, help="Target transported fraction.")
@click.option("--max-iters", default=500, show_default=True)
@click.option("--tol", default=1e-9, show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
@_exit_codes
def cmd_sinkhorn(cost_file, epsilon, mass, max_iters, tol, out):
    """Solve partial OT on a CSV cost matrix; write plan and diagnostics."""
    out_dir = _out_dir(out)
    cost = _load_matrix_csv(cost_file)
    cfg = PartialOTConfig(epsilon=epsilon, mass=mass, max_iters=max_iters, tol=tol)
    result = solve_partial_ot(cost, cfg)
    _save_matrix_csv(out_dir / "plan.csv", result.plan)
    _write_json(
        out_dir / "diagnostics.json",
        {
            "iters_used": result.iters_used,
            "marginal_residual": result.marginal_residual,
            "transported_mass": result.transported_mass,
            "shape": list(result.plan.shape),
        },
    )
    _write_resolved_config(
        out_dir,
        "sinkhorn",
        {
            "cost_file": str(cost_file),
            "epsilon": epsilon,
            "mass": mass,
            "max_iters": max_iters,
            "tol": tol,
        },
    )


@main.command("cost")
@click.argument("text_csv", type=click.Path(exists=True, dir_okay=False))
@click.argument("patches_csv", type=click.Path(exists=True, dir_okay=False))
@click.argument("attention_csv", type=click.Path(exists=True, dir_okay=False))
@click.option("--frames", required=True, type=int)
@click.option("--height", default=1, show_default=True, type=int)
@click.option("--width", default=1, show_default=True, type=int)
@click.option("--gamma", default=0.2, show_default=True, help="Temporal weight.")
@click.option("--eta", default=0.2, show_default=True, help="Spatial weight.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@_exit_codes
def cmd_cost(text_csv, patches_csv, attention_csv, frames, height, width, gamma, eta, out):
    """Build the spatio-temporal cost matrix from CSV token inputs."""
    out_dir = _out_dir(out)
    grid = PatchGrid.regular(frames, height, width)
    cm = build_cost(
        _load_matrix_csv(text_csv),
        _load_matrix_csv(patches_csv),
        _load_matrix_csv(attention_csv),
        grid,
        CostWeights(gamma=gamma, eta=eta),
    )
    _save_matrix_csv(out_dir / "cost.csv", cm.C)
    _save_matrix_csv(out_dir / "semantic.csv", cm.semantic)
    _save_matrix_csv(out_dir / "temporal.csv", cm.temporal)
    _save_matrix_csv(out_dir / "spatial.csv", cm.spatial)
    _write_resolved_config(
        out_dir,
        "cost",
        {
            "text_csv": str(text_csv),
            "patches_csv": str(patches_csv),
            "attention_csv": str(attention_csv),
            "frames": frames,
            "height": height,
            "width": width,
            "gamma": gamma,
            "eta": eta,
        },
    )


@main.command("train-not")
@click.argument("text_emb", type=click.Path(exists=True, dir_okay=False))
@click.argument("video_emb", type=click.Path(exists=True, dir_okay=False))
@click.option("--steps", default=1000, show_default=True)
@click.option("--kt", default=10, show_default=True, help="Inner map updates per step.")
@click.option("--batch", default=128, show_default=True)
@click.option("--lr-map", default=1e-3, show_default=True)
@click.option("--lr-potential", default=1e-3, show_default=True)
@click.option("--hidden", default=64, show_default=True)
@click.option("--seed", default=None, type=int, help="Falls back to PISCES_SEED, then 0.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@_exit_codes
def cmd_train_not(text_emb, video_emb, steps, kt, batch, lr_map, lr_potential, hidden, seed, out):
    """Train the text-to-video map; write map.otmap and the loss curves."""
    out_dir = _out_dir(out)
    seed = _resolve_seed(seed)
    cfg = NotTrainConfig(
        inner_iters=kt,
        steps=steps,
        batch=batch,
        lr_map=lr_map,
        lr_potential=lr_potential,
        hidden=hidden,
        seed=seed,
    )
    artifact = train_not(synth.read_emb(text_emb), synth.read_emb(video_emb), cfg)
    save_ot_map(artifact, out_dir / "map.otmap")
    with open(out_dir / "curve.csv", "w", encoding="utf-8") as fh:
        fh.write("step,map_loss,potential_loss\n")
        for i, (lm, lp) in enumerate(zip(artifact.curve_map, artifact.curve_potential)):
            fh.write(f"{i},{lm:.17g},{lp:.17g}\n")
    _write_resolved_config(
        out_dir,
        "train-not",
        {
            "text_emb": str(text_emb),
            "video_emb": str(video_emb),
            "steps": steps,
            "kt": kt,
            "batch": batch,
            "lr_map": lr_map,
            "lr_potential": lr_potential,
            "hidden": hidden,
            "seed": seed,
        },
    )


@main.command("eval-align")
@click.argument("text_emb", type=click.Path(exists=True, dir_okay=False))
@click.argument("video_emb", type=click.Path(exists=True, dir_okay=False))
@click.argument("map_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--k", default=10, show_default=True, help="Neighbors per point.")
@click.option("--bins", default=40, show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
@_exit_codes
def cmd_eval_align(text_emb, video_emb, map_file, k, bins, out):
    """Alignment report: pre/post neighbor overlap, rank correlation, histograms."""
    out_dir = _out_dir(out)
    text = synth.read_emb(text_emb)
    video = synth.read_emb(video_emb)
    artifact = load_ot_map(map_file)
    mapped = artifact.apply(text.vectors)
    report = metrics.build_align_report(text.vectors, video.vectors, mapped, k=k, bins=bins)
    report.save_json(out_dir / "align_report.json")
    report.save_histogram_csv(out_dir / "histograms.csv")
    _write_resolved_config(
        out_dir,
        "eval-align",
        {
            "text_emb": str(text_emb),
            "video_emb": str(video_emb),
            "map_file": str(map_file),
            "k": k,
            "bins": bins,
        },
    )


@main.command("synth")
@click.argument("spec_json", type=click.Path(exists=True, dir_okay=False))
@click.option("--out-prefix", required=True, help="Prefix for <prefix>_text.emb / _video.emb.")
@_exit_codes
def cmd_synth(spec_json, out_prefix):
    """Generate the misaligned text/video embedding pair from a JSON spec."""
    with open(spec_json, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if "text_offset" in raw and isinstance(raw["text_offset"], list):
        raw["text_offset"] = tuple(raw["text_offset"])
    spec = synth.SynthSpec(**raw)
    text, video = synth.generate(spec)
    prefix = Path(out_prefix)
    if prefix.parent != Path("."):
        prefix.parent.mkdir(parents=True, exist_ok=True)
    synth.write_emb(text, f"{out_prefix}_text.emb")
    synth.write_emb(video, f"{out_prefix}_video.emb")
    payload = {"command": "synth", "spec_json": str(spec_json), "out_prefix": str(out_prefix)}
    payload.update({k: (list(v) if isinstance(v, tuple) else v) for k, v in raw.items()})
    with open(f"{out_prefix}_resolved_config.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


@main.command("posttrain")
@click.argument("world_json", type=click.Path(exists=True, dir_okay=False))
@click.option("--mode", type=click.Choice(["direct", "grpo"]), required=True)
@click.option("--steps", default=100, show_default=True)
@click.option("--lr", default=0.02, show_default=True)
@click.option("--batch", default=8, show_default=True)
@click.option("--no-cd", is_flag=True, help="Drop the consistency term from the loss.")
@click.option("--adaptive-rewards", is_flag=True, help="Group-standardize rewards per prompt (direct mode).")
@click.option("--heldout", default=24, show_default=True, help="Held-out episodes per evaluation.")
@click.option("--seed", default=None, type=int, help="Falls back to PISCES_SEED, then 0.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@_exit_codes
def cmd_posttrain(world_json, mode, steps, lr, batch, no_cd, adaptive_rewards, heldout, seed, out):
    """Build the toy world and fine-tune its denoiser; write the step report."""
    out_dir = _out_dir(out)
    seed = _resolve_seed(seed)
    world_cfg = posttrain.WorldConfig.from_json(world_json)
    world = posttrain.build_world(world_cfg)
    report = posttrain.run_posttrain(
        world,
        mode,
        steps,
        seed,
        lr=lr,
        batch=batch,
        use_cd=not no_cd,
        adaptive=adaptive_rewards,
        heldout_episodes=heldout,
    )
    report.save_jsonl(out_dir / "report.jsonl")
    summary = report.summary()
    with open(out_dir / "summary.csv", "w", encoding="utf-8") as fh:
        keys = ["mode", "steps", "seed", "initial_heldout", "final_heldout"]
        fh.write(",".join(keys) + "\n")
        fh.write(",".join(_csv_cell(summary[k]) for k in keys) + "\n")
    _write_resolved_config(
        out_dir,
        "posttrain",
        {
            "world_json": str(world_json),
            "world_config": world_cfg.__dict__,
            "mode": mode,
            "steps": steps,
            "lr": lr,
            "batch": batch,
            "use_cd": not no_cd,
            "adaptive_rewards": adaptive_rewards,
            "heldout": heldout,
            "seed": seed,
        },
    )


def _csv_cell(value) -> str:
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


if __name__ == "__main__":
    main()
