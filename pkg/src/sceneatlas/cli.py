"""Command-line workflow: init, train, render, atlas, edit, chat, serve."""

from __future__ import annotations

import sys
from pathlib import Path

import click
import numpy as np

from . import scene_io
from .editor import ATLAS_RESOLUTION, SceneAssets
from .errors import SceneAtlasError
from .fields import render_view, render_view_from_textures
from .planner import ScriptedPlanner, RemotePlanner, load_rules
from .router import SceneRegistry, SessionStore, run_turn
from .scene_io import SceneDirectory, load_scene, load_checkpoint, save_checkpoint
from .service import ServiceConfig, create_app
from .tools import default_registry, dispatch_tool
from .training import TrainConfig, fit, train_config_from_file, write_history_csv


@click.group()
def main() -> None:
    """Multi-view scene decomposition and atlas-space editing."""


def _fail(exc: Exception) -> None:
    raise click.ClickException(str(exc))


@main.command()
@click.argument("images_dir", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
def init(images_dir: Path, out_dir: Path) -> None:
    """Build a scene directory (views + manifest) from a directory of images."""
    try:
        viewset = load_scene(images_dir)
        SceneDirectory.create(out_dir, viewset, source=str(images_dir))
    except SceneAtlasError as exc:
        _fail(exc)
    click.echo(f"initialized scene at {out_dir} ({viewset.num_views} views)")


@main.command()
@click.argument("scene_dir", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--config", "config_file", type=click.Path(exists=True, path_type=Path))
@click.option("--steps", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
def train(scene_dir: Path, config_file: Path | None, steps: int | None,
          seed: int | None, batch_size: int | None) -> None:
    """Fit the mapping and atlas fields; writes a checkpoint and loss CSV."""
    try:
        cfg = train_config_from_file(config_file) if config_file else TrainConfig()
        if steps is not None:
            cfg.total_steps = steps
        if seed is not None:
            cfg.seed = seed
        if batch_size is not None:
            cfg.batch_size = batch_size
        scene = SceneDirectory(scene_dir)
        viewset = load_scene(scene_dir)

        def progress(step: int, report) -> None:
            if (step + 1) % 200 == 0 or step + 1 == cfg.total_steps:
                click.echo(
                    f"\rstep {step + 1}/{cfg.total_steps} "
                    f"total {report.total:.5f} rec {report.rec_ori:.5f}",
                    nl=(step + 1 == cfg.total_steps),
                )
        result = fit(viewset, cfg, callback=progress)
        save_checkpoint(result.mapping, result.atlas, scene.checkpoint_path)
        write_history_csv(result.history, scene.ckpt_dir / "loss_history.csv")
    except SceneAtlasError as exc:
        _fail(exc)
    click.echo(f"checkpoint written to {scene.checkpoint_path}")


@main.command()
@click.argument("scene_dir", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--edit", "edit_id", default=None, help="render an edit's textures instead")
@click.option("--out", "out_dir", type=click.Path(path_type=Path), default=None)
def render(scene_dir: Path, edit_id: str | None, out_dir: Path | None) -> None:
    """Write all view renders from the checkpoint (or an edit's textures)."""
    try:
        scene = SceneDirectory(scene_dir)
        man = scene.manifest()
        t_count, h, w = int(man["views"]), int(man["height"]), int(man["width"])
        mapping, atlas = load_checkpoint(scene.checkpoint_path)
        out_dir = out_dir or (scene.root / ("renders" if edit_id is None else f"renders-{edit_id}"))
        if edit_id is not None:
            fg = scene_io.read_image_rgba(scene.edits_dir / edit_id / "fg.png")
            bg = scene_io.read_image(scene.edits_dir / edit_id / "bg.png")
            for t in range(t_count):
                img = render_view_from_textures(mapping, fg, bg, t, h, w, t_count)
                scene_io.write_image(out_dir / f"{t:04d}.png", img)
        else:
            for t in range(t_count):
                img = render_view(mapping, atlas, t, h, w, t_count)
                scene_io.write_image(out_dir / f"{t:04d}.png", img)
    except SceneAtlasError as exc:
        _fail(exc)
    click.echo(f"wrote {t_count} renders to {out_dir}")


@main.command()
@click.argument("scene_dir", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--res", "resolution", type=int, default=ATLAS_RESOLUTION)
def atlas(scene_dir: Path, resolution: int) -> None:
    """Rasterize and cache the foreground/background atlas textures."""
    try:
        scene = SceneDirectory(scene_dir)
        for name in ("fg.png", "bg.png"):
            (scene.atlases_dir / name).unlink(missing_ok=True)
        SceneAssets(scene).atlases(resolution)
    except SceneAtlasError as exc:
        _fail(exc)
    click.echo(f"atlases written to {scene.atlases_dir} at {resolution}x{resolution}")


@main.command()
@click.argument("scene_dir", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--tool", "tool_name", required=True)
@click.option("--args", "args_csv", default="", help="comma-separated tool arguments")
@click.option("--res", "resolution", type=int, default=None)
def edit(scene_dir: Path, tool_name: str, args_csv: str, resolution: int | None) -> None:
    """Apply one tool non-interactively."""
    try:
        scene = SceneDirectory(scene_dir)
        args = [a.strip() for a in args_csv.split(",") if a.strip()]
        result = dispatch_tool(scene, tool_name, args, default_registry(), resolution)
    except SceneAtlasError as exc:
        _fail(exc)
    if result.kind == "edit":
        click.echo(f"edit {result.edit.edit_id}: {result.summary}")
        click.echo(str(result.edit.directory))
    elif result.kind == "artifact":
        click.echo(f"artifact: {result.artifact_path}")
    else:
        click.echo(result.text)


@main.command()
@click.argument("scene_dir", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--planner", "planner_kind", type=click.Choice(["scripted", "remote"]),
              default="scripted")
@click.option("--rules", "rules_file", type=click.Path(exists=True, path_type=Path))
@click.option("--res", "resolution", type=int, default=None)
@click.option("--seed", type=int, default=0, help="registry seed for handle names")
def chat(scene_dir: Path, planner_kind: str, rules_file: Path | None,
         resolution: int | None, seed: int) -> None:
    """Interactive REPL; each line is one dialogue turn."""
    try:
        registry = SceneRegistry(seed=seed)
        handle = registry.issue(SceneDirectory(scene_dir))
        tools = default_registry()
        if planner_kind == "remote":
            planner = RemotePlanner()
        else:
            planner = ScriptedPlanner(load_rules(rules_file) if rules_file else None)
        session = SessionStore().create(handle)
    except SceneAtlasError as exc:
        _fail(exc)

    click.echo(f"scene registered as {handle}; type a request (ctrl-d to exit)")
    for line in sys.stdin:
        text = line.strip()
        if not text:
            continue
        reply = run_turn(session, text, planner, registry, tools, resolution=resolution)
        click.echo(reply.text)
        for art in reply.artifacts:
            where = art.path if art.path else art.handle
            click.echo(f"  [{art.kind}] {art.handle or ''} {where}")


@main.command()
@click.option("--config", "config_file", type=click.Path(exists=True, path_type=Path))
def serve(config_file: Path | None) -> None:
    """Start the HTTP API (and the web UI when a bundle is configured)."""
    import uvicorn

    try:
        cfg = ServiceConfig.from_file(config_file) if config_file else ServiceConfig()
        app = create_app(cfg)
    except SceneAtlasError as exc:
        _fail(exc)
    uvicorn.run(app, host=cfg.host, port=cfg.port, log_level="info")


if __name__ == "__main__":
    main()
