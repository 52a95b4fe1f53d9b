"""Command-line entry point: ``surfcnn preprocess|synth|train|eval|infer|verify``.

Exit codes: 0 success, 1 operational error, 2 verification failure.
``SURFCNN_THREADS`` caps the BLAS/OpenMP thread count.
"""

import os
import sys

_threads = os.environ.get("SURFCNN_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import json  # noqa: E402

import click  # noqa: E402
import numpy as np  # noqa: E402

from . import cache as cc  # noqa: E402
from . import pipeline as pl  # noqa: E402
from . import synth as sy  # noqa: E402
from . import training as tr  # noqa: E402
from . import verify as vf  # noqa: E402
from .mesh import MeshError, load_mesh, write_obj  # noqa: E402
from .network import MeshInput, Network, NetworkDescription, NetworkError  # noqa: E402

EXIT_OK, EXIT_ERROR, EXIT_VERIFY = 0, 1, 2
PALETTE = np.array([
    [0.90, 0.30, 0.25], [0.25, 0.55, 0.90], [0.30, 0.75, 0.35], [0.95, 0.75, 0.20],
    [0.60, 0.40, 0.80], [0.20, 0.80, 0.80], [0.85, 0.45, 0.70], [0.55, 0.55, 0.55],
])


class OperationalError(click.ClickException):
    exit_code = EXIT_ERROR


def _config(ctx_obj, **overrides) -> pl.RunConfig:
    try:
        return pl.RunConfig.load(ctx_obj.get("config"), **overrides)
    except (ValueError, OSError) as exc:
        raise OperationalError(f"bad configuration: {exc}")


def _echo_json(obj):
    click.echo(json.dumps(obj, indent=1, sort_keys=True, default=str))


@click.group()
@click.option("--config", type=click.Path(exists=True, dir_okay=False), help="YAML run configuration.")
@click.pass_context
def main(ctx, config):
    """Convolutional networks on triangle meshes with parallel N-direction frames."""
    ctx.ensure_object(dict)
    ctx.obj["config"] = config


_cfg_options = [
    click.option("--cache-dir", default=None, help="Directory holding .sfcv caches."),
    click.option("--N", "N", type=int, default=None, help="Frame symmetry order (default 4)."),
    click.option("--lam", type=float, default=None, help="Curvature alignment weight (default 0.01)."),
    click.option("--levels", type=int, default=None, help="Hierarchy depth."),
    click.option("--ratio", type=float, default=None, help="Vertex ratio between levels, in [2, 4]."),
    click.option("--seed", type=int, default=None),
]


def cfg_options(f):
    for opt in reversed(_cfg_options):
        f = opt(f)
    return f


@main.command()
@click.argument("meshes", nargs=-1, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", type=click.Path(exists=True, file_okay=False), default=None,
              help="Dataset directory with manifest.json (adds its meshes).")
@cfg_options
@click.option("--level-targets", default=None, help="Comma-separated vertex targets, finest first.")
@click.option("--force", is_flag=True, help="Recompute even when caches are current.")
@click.option("--report", type=click.Path(dir_okay=False), default=None, help="Write the JSON report here.")
@click.pass_context
def preprocess(ctx, meshes, data, cache_dir, N, lam, levels, ratio, seed, level_targets, force, report):
    """Build hierarchies, frames and patches; one cache per mesh."""
    targets = [int(t) for t in level_targets.split(",")] if level_targets else None
    cfg = _config(ctx.obj, cache_dir=cache_dir, N=N, lam=lam, levels=levels, ratio=ratio, seed=seed,
                  level_targets=targets, data=data)
    paths, names = list(meshes), [os.path.splitext(os.path.basename(m))[0] for m in meshes]
    if cfg.data:
        man = sy.load_manifest(cfg.data)
        paths += pl.manifest_paths(man)
        names += [it["name"] for it in man["items"]]
    if not paths:
        raise OperationalError("no meshes given")
    try:
        reps = pl.preprocess_many(paths, cfg, force=force, names=names)
    except OSError as exc:
        raise OperationalError(str(exc))
    summary = {
        "cache_dir": cfg.cache_dir,
        "computed": sum(1 for r in reps if not r.get("skipped")),
        "up_to_date": sum(1 for r in reps if r.get("skipped") and "error" not in r),
        "failed": [{"mesh": r["mesh"], "error": r["error"]} for r in reps if "error" in r],
        "meshes": reps,
    }
    if report:
        with open(report, "w") as fh:
            json.dump(summary, fh, indent=1, sort_keys=True)
    for r in reps:
        if "error" in r:
            click.echo(f"SKIP {r['mesh']}: {r['error']}")
        else:
            state = "cached" if r["skipped"] else "built"
            click.echo(f"{state} {r['name']}: levels {r['level_sizes']}, index sum {r['index_sum']:g}, "
                       f"{r['singularity_count']} singular faces, energy {r['frame_energy']:.4g}")
    click.echo(f"{summary['computed']} computed, {summary['up_to_date']} up to date, {len(summary['failed'])} failed")
    if summary["failed"]:
        ctx.exit(EXIT_ERROR)


@main.command()
@click.argument("kind", type=click.Choice(sy.KINDS))
@click.option("--count", type=int, default=90, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def synth(kind, count, seed, out_dir):
    """Generate a synthetic dataset."""
    man = sy.generate(kind, count, seed, out_dir)
    click.echo(f"wrote {len(man['items'])} {kind} meshes to {out_dir}")


def _load_data(cfg: pl.RunConfig):
    if not cfg.data:
        raise OperationalError("no dataset given (--data or 'data' in the config)")
    man = sy.load_manifest(cfg.data)
    try:
        return man, pl.load_items(man, cfg)
    except (FileNotFoundError, ValueError) as exc:
        raise OperationalError(str(exc))


@main.command()
@click.option("--data", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--network", default=None, help="Network YAML or bundled name (classify, segment, regress).")
@click.option("--out-dir", default=None, help="Run directory for checkpoint, log and network copy.")
@click.option("--epochs", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--accumulate", type=int, default=None, help="Meshes per optimizer step.")
@click.option("--precision", type=click.Choice(["double", "single"]), default=None)
@click.option("--reduce-mode", type=click.Choice(["max", "average"]), default=None)
@click.option("--pool-mode", type=click.Choice(["max", "average"]), default=None)
@click.option("--resume", type=click.Path(exists=True, dir_okay=False), default=None)
@cfg_options
@click.pass_context
def train(ctx, data, network, out_dir, epochs, lr, accumulate, precision, reduce_mode, pool_mode, resume,
          cache_dir, N, lam, levels, ratio, seed):
    """Train on the training split of a preprocessed dataset."""
    cfg = _config(ctx.obj, data=data, network=network, out_dir=out_dir, epochs=epochs, lr=lr,
                  accumulate=accumulate, precision=precision, reduce_mode=reduce_mode, pool_mode=pool_mode,
                  cache_dir=cache_dir, N=N, lam=lam, levels=levels, ratio=ratio, seed=seed)
    _, items = _load_data(cfg)
    trn, tst = pl.split(items, cfg.train_fraction)
    try:
        desc = cfg.network_description()
        net = Network(desc, N=cfg.N, seed=cfg.seed, dtype=cfg.dtype)
    except (ValueError, OSError) as exc:
        raise OperationalError(str(exc))
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "network.yaml"), "w") as fh:
        import yaml

        yaml.safe_dump(desc.to_dict(), fh, sort_keys=False)
    ckpt = os.path.join(cfg.out_dir, "checkpoint.sfck")
    try:
        hist = tr.train(net, trn, tr.TrainConfig(cfg.lr, cfg.epochs, cfg.seed, cfg.accumulate),
                        log_path=os.path.join(cfg.out_dir, "metrics.jsonl"), checkpoint_path=ckpt,
                        resume=resume, eval_items=tst or None, verbose=True)
    except (tr.TrainingError, NetworkError) as exc:
        raise OperationalError(str(exc))
    click.echo(f"trained {len(hist)} epochs on {len(trn)} meshes; checkpoint {ckpt}")


def _network_for(checkpoint, network, cfg):
    path = network or os.path.join(os.path.dirname(os.path.abspath(checkpoint)), "network.yaml")
    if not os.path.exists(path):
        raise OperationalError(f"network description {path} not found")
    desc = NetworkDescription.from_yaml(path)
    net = Network(desc, N=desc.N or cfg.N, dtype=cfg.dtype)
    try:
        tr.load_checkpoint(checkpoint, net)
    except tr.CheckpointError as exc:
        raise OperationalError(str(exc))
    return net


@main.command("eval")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--network", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Defaults to network.yaml next to the checkpoint.")
@click.option("--data", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--split", "which", type=click.Choice(["test", "train", "all"]), default="test", show_default=True)
@click.option("--cache-dir", default=None)
@click.pass_context
def eval_cmd(ctx, checkpoint, network, data, which, cache_dir):
    """Evaluate a checkpoint; prints metrics as JSON."""
    cfg = _config(ctx.obj, data=data, cache_dir=cache_dir)
    net = _network_for(checkpoint, network, cfg)
    cfg.N = net.N
    _, items = _load_data(cfg)
    trn, tst = pl.split(items, cfg.train_fraction)
    chosen = {"train": trn, "test": tst, "all": items}[which]
    try:
        metrics = tr.evaluate(net, chosen)
    except NetworkError as exc:
        raise OperationalError(str(exc))
    metrics["meshes"] = len(chosen)
    metrics["split"] = which
    _echo_json(metrics)


@main.command()
@click.argument("mesh", type=click.Path(exists=True, dir_okay=False))
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--network", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", "prefix", required=True, help="Output prefix; writes PREFIX.obj and PREFIX.tsv.")
@click.option("--classes", default=None, help="Comma-separated class names for the table.")
@cfg_options
@click.pass_context
def infer(ctx, mesh, checkpoint, network, prefix, classes, cache_dir, N, lam, levels, ratio, seed):
    """Predict on one mesh: vertex-colored OBJ plus a per-vertex table."""
    cfg = _config(ctx.obj, cache_dir=cache_dir, N=N, lam=lam, levels=levels, ratio=ratio, seed=seed)
    net = _network_for(checkpoint, network, cfg)
    cfg.N = net.N
    if not cfg.level_targets:
        cfg.levels = max(cfg.levels, net.desc.levels_needed)
    os.makedirs(os.path.dirname(os.path.abspath(prefix)), exist_ok=True)
    try:
        m = load_mesh(mesh)
        from .hierarchy import build_hierarchy

        h = build_hierarchy(m, cfg.targets_for(m.n_vertices), N=cfg.N, lam=cfg.lam, seed=cfg.seed)
        out = net.forward(MeshInput.from_hierarchy(h))
    except (MeshError, NetworkError, ValueError) as exc:
        raise OperationalError(str(exc))
    fine = h.levels[0].mesh
    V = fine.n_vertices
    names = classes.split(",") if classes else None
    task = net.desc.task
    rows = []
    if task == "regression":
        header = ["vertex", "x", "y", "z", "nx", "ny", "nz"]
        for i in range(V):
            rows.append([i] + [f"{v:.9g}" for v in out[:, i]])
        p = out[:3].T
        lo, hi = p.min(0), p.max(0)
        colors = (p - lo) / np.where(hi > lo, hi - lo, 1)
    else:
        scores = out if task == "segmentation" else np.repeat(out[:, None], V, axis=1)
        prob = np.exp(tr.log_softmax(scores, axis=0))
        label = np.argmax(scores, axis=0)
        header = ["vertex", "label"] + [f"p_{names[k] if names and k < len(names) else k}"
                                        for k in range(scores.shape[0])]
        for i in range(V):
            lab = names[label[i]] if names and label[i] < len(names) else str(label[i])
            rows.append([i, lab] + [f"{v:.6g}" for v in prob[:, i]])
        colors = PALETTE[label % len(PALETTE)]
    write_obj(prefix + ".obj", fine, colors=colors)
    with open(prefix + ".tsv", "w") as fh:
        fh.write("\t".join(header) + "\n")
        for r in rows:
            fh.write("\t".join(str(v) for v in r) + "\n")
    click.echo(f"wrote {prefix}.obj and {prefix}.tsv ({V} vertices, task {task})")


@main.command()
@click.option("--suite", "suites", multiple=True, type=click.Choice(vf.SUITES + ("all",)), default=("all",),
              show_default=True)
@click.option("--mesh", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--cache", "cache_file", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--seed", type=int, default=0)
@click.option("--N", "N", type=int, default=4)
@click.option("--json", "as_json", is_flag=True, help="Print the summary as JSON only.")
@click.pass_context
def verify(ctx, suites, mesh, cache_file, seed, N, as_json):
    """Run invariant suites; exit code 2 if any check fails."""
    names = vf.SUITES if "all" in suites else tuple(dict.fromkeys(suites))
    m = None
    results = []
    try:
        if mesh:
            m = load_mesh(mesh)
        if cache_file:
            contents = cc.read_cache(cache_file)
            lv = contents.hierarchy.levels[0]
            m = lv.mesh
            N = contents.N
            if "poincare-hopf" in names:
                total = lv.atlas.index.sum() / N
                chi = m.euler_characteristic
                results.append(vf.Check("poincare-hopf", "cache/index_sum_minus_chi", float(abs(total - chi)), 1e-9,
                                        abs(total - chi) < 1e-9, f"sum {total:g}, chi {chi}"))
                worst = float(np.abs(lv.atlas.residual).max())
                results.append(vf.Check("poincare-hopf", "cache/max_matched_angle", worst, np.pi / N + 1e-9,
                                        worst <= np.pi / N + 1e-9))
                names = tuple(n for n in names if n != "poincare-hopf")
        results += vf.run_suites(names, mesh=m, seed=seed, N=N)
    except (MeshError, cc.CacheError, ValueError) as exc:
        raise OperationalError(str(exc))
    ok = all(r.passed for r in results)
    summary = {"passed": ok, "checks": [r.__dict__ for r in results]}
    if as_json:
        _echo_json(summary)
    else:
        for r in results:
            click.echo(r.line())
        click.echo(json.dumps({"passed": ok, "failed": [f"{r.suite}/{r.name}" for r in results if not r.passed]}))
    ctx.exit(EXIT_OK if ok else EXIT_VERIFY)


def run(argv=None) -> int:
    """Invoke the CLI and return its exit code (usage errors map to 1)."""
    try:
        rv = main.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return EXIT_ERROR if isinstance(exc, click.UsageError) else exc.exit_code
    except click.exceptions.Abort:
        return EXIT_ERROR
    # non-standalone click returns ctx.exit codes instead of raising
    return rv if isinstance(rv, int) else EXIT_OK


def entry() -> None:
    sys.exit(run())


if __name__ == "__main__":
    entry()
