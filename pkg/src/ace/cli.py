"""Operator command line.

Every command loads the workspace snapshot, acts, and writes it back; there
is no daemon. Deployments are replayed into a fresh simulated platform on
each invocation, so ``app status`` reflects a platform that has just been
brought back up from the persisted manifests.

Workspace layout::

    registry.json            infrastructure registry snapshot
    declarations.json        declaration digest -> infrastructure id
    state.json               deployed apps and node generations
    apps/<app>/plan.json     last submitted plan
    apps/<app>/record.json   last deployment record
    manifests/<node>.yaml    current per-node manifest

Exit codes: 0 ok, 2 user error, 3 experiment trend failure, 4 internal error.
"""

from __future__ import annotations

import fcntl
import hashlib
import json
import logging
import sys
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import click
import yaml

from .controller import IMAGES, ControllerError, DeploymentRecord, IdleBehavior
from .infrastructure import Registry, RegistryError
from .orchestrator import OrchestrationError
from .platform import Platform
from .simnet import Scenario
from .topology import DeploymentPlan, TopologyError, diff, parse_topology

EXIT_OK, EXIT_USER, EXIT_TREND, EXIT_INTERNAL = 0, 2, 3, 4

log = logging.getLogger("ace.cli")


class UserError(click.ClickException):
    exit_code = EXIT_USER


@dataclass
class CliConfig:
    workspace: Path
    seed: int = 1
    scenario: Optional[Path] = None
    out: Optional[Path] = None
    seed_given: bool = False

    def __post_init__(self):
        self.workspace.mkdir(parents=True, exist_ok=True)
        probe = self.workspace / ".probe"
        try:
            probe.write_text("")
            probe.unlink()
        except OSError as exc:
            raise UserError(f"workspace {self.workspace} is not writable: {exc}") from None

    def path(self, *parts: str) -> Path:
        return self.workspace.joinpath(*parts)

    @property
    def out_dir(self) -> Path:
        return self.out or self.workspace


@contextmanager
def workspace_lock(cfg: CliConfig):
    with open(cfg.path(".lock"), "w") as fh:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise UserError(f"workspace {cfg.workspace} is locked by another command") from None
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def _read_json(path: Path, default=None):
    return json.loads(path.read_text()) if path.exists() else default


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _load_yaml(path: Path):
    try:
        return yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}" if mark is not None else ""
        raise UserError(f"{path}: malformed YAML{where}: {getattr(exc, 'problem', exc)}") from None
    except OSError as exc:
        raise UserError(str(exc)) from None


def load_registry(cfg: CliConfig) -> Registry:
    snap = _read_json(cfg.path("registry.json"))
    if snap is None:
        raise UserError("no infrastructure registered; run `ace infra register` first")
    return Registry.from_snapshot(snap)


# --- platform replay ---------------------------------------------------------

def _scenario(cfg: CliConfig) -> Scenario:
    if cfg.scenario is None:
        return Scenario(seed=cfg.seed)
    doc = _load_yaml(cfg.scenario) or {}
    if cfg.seed_given:
        doc["seed"] = cfg.seed
    try:
        return Scenario(**doc)
    except TypeError as exc:
        raise UserError(f"{cfg.scenario}: {exc}") from None


def open_platform(cfg: CliConfig) -> Platform:
    """Fresh platform with every persisted deployment reinstalled and settled."""
    registry = load_registry(cfg)
    infra = next(iter(registry.infras.values()))
    images = IMAGES.copy(fallback=IdleBehavior)
    platform = Platform(_scenario(cfg), registry=registry, infra=infra, images=images)
    state = _read_json(cfg.path("state.json"), {"apps": {}, "node_gen": {}})
    for name in sorted(state["apps"]):
        doc = state["apps"][name]
        plan = DeploymentPlan.from_dict(doc["plan"])
        instances = {iid: (v["component"], v["index"], v["node"]) for iid, v in doc["instances"].items()}
        platform.controller.restore(plan, instances, doc["version"])
    platform.controller.bump_to(state["node_gen"])
    for rec in list(platform.controller.records.values()):
        platform.settle(rec)
    return platform


def save_platform(cfg: CliConfig, platform: Platform) -> None:
    ctl = platform.controller
    apps = {}
    for name, rec in sorted(ctl.records.items()):
        if rec.status == "removed":
            continue
        apps[name] = {"plan": rec.plan.to_dict(), "version": rec.version,
                      "instances": rec.to_dict()["instances"]}
    _write(cfg.path("state.json"), json.dumps({"apps": apps, "node_gen": dict(sorted(ctl.node_gen.items()))},
                                              sort_keys=True, indent=2))
    mdir = cfg.path("manifests")
    mdir.mkdir(exist_ok=True)
    for m in ctl.manifests():
        _write(mdir / f"{m.node}.yaml", m.to_compose())


def _write_record(cfg: CliConfig, rec: DeploymentRecord) -> None:
    _write(cfg.path("apps", rec.app_name, "record.json"), json.dumps(rec.to_dict(), sort_keys=True, indent=2))


def _echo_record(rec: DeploymentRecord) -> None:
    click.echo(f"{rec.app_name} v{rec.version}: {rec.status}")
    for iid, (component, _, node) in sorted(rec.instances.items()):
        click.echo(f"  {iid:<28} {component:<6} {node}")
    for iid, why in sorted(rec.detail.items()):
        click.echo(f"  ! {iid}: {why}")


# --- commands ------------------------------------------------------------------

@click.group()
@click.option("--workspace", type=click.Path(file_okay=False, path_type=Path), default=Path(".ace"),
              show_default=True, help="Directory holding all persisted state.")
@click.option("--seed", type=int, default=None, help="Simulation seed (default 1).")
@click.option("--scenario", type=click.Path(dir_okay=False, exists=True, path_type=Path), default=None,
              help="YAML scenario: link rates, delay, partitions.")
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="Output directory for experiment artifacts (default: workspace).")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def cli(ctx, workspace, seed, scenario, out, verbose):
    """Edge-cloud application platform, simulated."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    ctx.obj = CliConfig(workspace, 1 if seed is None else seed, scenario, out, seed_given=seed is not None)


@cli.group()
def infra():
    """Infrastructure registry."""


@infra.command("register")
@click.argument("infra_file", type=click.Path(dir_okay=False, path_type=Path))
@click.pass_obj
def infra_register(cfg: CliConfig, infra_file: Path):
    """Register the clusters and nodes declared in INFRA_FILE."""
    doc = _load_yaml(infra_file)
    key = hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()
    with workspace_lock(cfg):
        snap = _read_json(cfg.path("registry.json"))
        registry = Registry() if snap is None else Registry.from_snapshot(snap)
        seen = _read_json(cfg.path("declarations.json"), {})
        if key in seen:
            record = registry.infra(seen[key])
        else:
            try:
                record = registry.load_declaration(doc)
            except (RegistryError, KeyError, TypeError, ValueError) as exc:
                raise UserError(f"{infra_file}: {type(exc).__name__}: {exc}") from None
            seen[key] = str(record.id)
            _write(cfg.path("registry.json"), registry.dumps())
            _write(cfg.path("declarations.json"), json.dumps(seen, sort_keys=True, indent=2))
    click.echo(json.dumps(record.to_dict(), sort_keys=True, indent=2))


@cli.group()
def app():
    """Application lifecycle."""


def _topology(path: Path):
    try:
        return parse_topology(path.read_bytes())
    except TopologyError as exc:
        raise UserError(f"{path}: {exc}") from None
    except OSError as exc:
        raise UserError(str(exc)) from None


@app.command("submit")
@click.argument("app_file", type=click.Path(dir_okay=False, path_type=Path))
@click.pass_obj
def app_submit(cfg: CliConfig, app_file: Path):
    """Validate and orchestrate APP_FILE; writes apps/<app>/plan.json."""
    topology = _topology(app_file)
    with workspace_lock(cfg):
        platform = open_platform(cfg)
        try:
            plan = platform.plan(topology)
        except OrchestrationError as exc:
            raise UserError(f"{type(exc).__name__}: {exc}") from None
        out = cfg.path("apps", topology.app_name, "plan.json")
        _write(out, plan.dumps())
    click.echo(f"plan for {topology.app_name} v{topology.version} written to {out}")
    for name, nodes in sorted(plan.instances.items()):
        click.echo(f"  {name:<6} -> {', '.join(str(n) for n in nodes)}")


@app.command("deploy")
@click.argument("app_name")
@click.pass_obj
def app_deploy(cfg: CliConfig, app_name: str):
    """Deploy the plan last submitted for APP_NAME."""
    with workspace_lock(cfg):
        doc = _read_json(cfg.path("apps", app_name, "plan.json"))
        if doc is None:
            raise UserError(f"NoPlan: submit {app_name} before deploying it")
        platform = open_platform(cfg)
        try:
            rec = platform.controller.deploy(DeploymentPlan.from_dict(doc))
        except ControllerError as exc:
            raise UserError(f"{type(exc).__name__}: {exc}") from None
        platform.settle(rec)
        save_platform(cfg, platform)
        _write_record(cfg, rec)
    _echo_record(rec)


@app.command("update")
@click.argument("app_file", type=click.Path(dir_okay=False, path_type=Path))
@click.option("--mode", type=click.Choice(["incremental", "thorough"]), default="incremental", show_default=True)
@click.pass_obj
def app_update(cfg: CliConfig, app_file: Path, mode: str):
    """Move a deployed app to the topology in APP_FILE."""
    topology = _topology(app_file)
    with workspace_lock(cfg):
        platform = open_platform(cfg)
        ctl = platform.controller
        try:
            current = ctl.active(topology.app_name)
            prepared = platform.prepare(topology)
            changes = diff(current.plan.topology, prepared)
            before = dict(ctl.node_gen)
            rec = platform.update(topology.app_name, topology, mode)
        except (ControllerError, TopologyError, OrchestrationError) as exc:
            raise UserError(f"{type(exc).__name__}: {exc}") from None
        touched = sorted(n for n, g in ctl.node_gen.items() if g != before.get(n))
        platform.settle(rec)
        save_platform(cfg, platform)
        _write(cfg.path("apps", rec.app_name, "plan.json"), rec.plan.dumps())
        _write_record(cfg, rec)
    if mode == "incremental" and changes.empty:
        click.echo(f"no changes for {rec.app_name}; nothing redeployed (now v{rec.version})")
        return
    click.echo(f"regenerated manifests: {', '.join(touched) or 'none'}")
    _echo_record(rec)


@app.command("remove")
@click.argument("app_name")
@click.pass_obj
def app_remove(cfg: CliConfig, app_name: str):
    """Stop every instance of APP_NAME."""
    with workspace_lock(cfg):
        platform = open_platform(cfg)
        try:
            rec = platform.controller.remove(app_name)
        except ControllerError as exc:
            raise UserError(f"{type(exc).__name__}: {exc}") from None
        platform.run_for(1000)
        save_platform(cfg, platform)
        _write_record(cfg, rec)
    click.echo(f"{app_name} removed")


@app.command("status")
@click.argument("app_name", required=False)
@click.pass_obj
def app_status(cfg: CliConfig, app_name: Optional[str]):
    """Print the monitoring snapshot, optionally for one app."""
    with workspace_lock(cfg):
        platform = open_platform(cfg)
        if app_name is not None and app_name not in platform.controller.records:
            raise UserError(f"UnknownApp: {app_name}")
        platform.run_for(platform.controller.stale_after / 1000)
        snap = platform.controller.collect_status()
    if app_name is not None:
        snap.instances = {k: v for k, v in snap.instances.items() if v["app"] == app_name}
    click.echo(snap.dumps())


@cli.group()
def exp():
    """Video-query experiment matrix."""


def _summary(reports) -> str:
    from .videoquery.experiment import _by, _mean

    lines = [f"{'paradigm':<9} {'load':>5} {'delay':>5} {'f1':>6} {'bwc':>8} {'eil_mean':>10} {'eil_p95':>10}"]
    for (p, load, delay), rs in sorted(_by(reports).items(), key=lambda kv: (kv[0][0], -kv[0][1], kv[0][2])):
        lines.append(f"{p:<9} {load:>5g} {delay:>5g} {_mean([r.f1 for r in rs]):>6.3f} "
                     f"{_mean([r.bwc for r in rs]):>8.3f} {_mean([r.eil_mean for r in rs]):>10.1f} "
                     f"{_mean([r.eil_p95 for r in rs]):>10.1f}")
    return "\n".join(lines)


def _trend_exit(reports) -> int:
    from .videoquery.experiment import trend_checks

    checks = trend_checks(reports)
    for c in checks:
        click.echo(c.line())
    return EXIT_OK if all(c.passed for c in checks) else EXIT_TREND


@exp.command("run")
@click.argument("exp_file", type=click.Path(dir_okay=False, path_type=Path), required=False)
@click.pass_obj
def exp_run(cfg: CliConfig, exp_file: Optional[Path]):
    """Run the paradigm x load x delay x seed matrix (default matrix without EXP_FILE)."""
    from .videoquery.experiment import MatrixConfig, results_csv, run_matrix

    try:
        mcfg = MatrixConfig.from_dict(_load_yaml(exp_file) if exp_file else None)
    except (ValueError, TypeError) as exc:
        raise UserError(f"{exp_file}: {exc}") from None
    if cfg.seed_given:
        mcfg.seeds = (cfg.seed,)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    total = len(mcfg.cells())
    done = []

    def progress(report):
        done.append(report)
        click.echo(f"[{len(done)}/{total}] {report.paradigm} {report.load:g}s {report.delay:g}ms "
                   f"seed {report.seed}: f1={report.f1:.3f} eil={report.eil_mean:.1f}ms", err=True)

    result = run_matrix(mcfg, out, progress)
    _write(out / "results.csv", results_csv(result.reports))
    click.echo(_summary(result.reports))
    click.echo(f"{total} runs in {result.seconds:.1f}s -> {out / 'results.csv'}")
    sys.exit(_trend_exit(result.reports))


@exp.command("report")
@click.argument("results", type=click.Path(dir_okay=False, path_type=Path), required=False)
@click.pass_obj
def exp_report(cfg: CliConfig, results: Optional[Path]):
    """Summarize a results.csv and re-run the trend checks on it."""
    from .videoquery.experiment import read_results_csv

    path = results or cfg.out_dir / "results.csv"
    if not path.exists():
        raise UserError(f"{path} not found; run `ace exp run` first")
    try:
        reports = read_results_csv(path)
    except (KeyError, ValueError) as exc:
        raise UserError(f"{path}: not a results file ({exc})") from None
    click.echo(_summary(reports))
    sys.exit(_trend_exit(reports))


def main(argv: Optional[list[str]] = None) -> int:
    try:
        cli.main(args=argv, prog_name="ace", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code if exc.exit_code != 1 else EXIT_USER
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_USER
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_INTERNAL
    except Exception:
        log.exception("internal error")
        click.echo("internal error (rerun with -v for details)", err=True)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
