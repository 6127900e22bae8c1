"""Command-line driver.

Every command accepts ``--config FILE`` with ``key = value`` lines whose keys
are the command's long option names; explicit flags override file values.
Failures exit nonzero with a single ``error<TAB>kind<TAB>message`` line on stderr.
"""

from __future__ import annotations

import os
import sys
from collections import defaultdict
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from .attack import mask_from_frames
from .config import AttackConfig, BoConfig, Budget, normalize_mode
from .data import (ContainerError, SynthConfig, export_pnm, generate_synthetic_dataset,
                   load_dataset, parse_config_file, parse_int_list, save_dataset, write_tensor)
from .metrics import (MetricsInput, aap, ani, asp, fmt, fooling_rate, normal_ci99)
from .models import ARCHS, init_classifier, load_classifier, save_classifier, train
from .runner import (read_rows, result_rows, row_result, rows_to_csv, run_attacks,
                     transfer_matrix)


def _load_config(ctx: click.Context, param: click.Parameter, value):
    if value is None:
        return value
    raw = parse_config_file(value)
    by_flag = {}
    for p in ctx.command.params:
        for opt in getattr(p, "opts", []):
            if opt.startswith("--"):
                by_flag[opt[2:].replace("-", "_")] = p.name
    unknown = sorted(k for k in raw if k not in by_flag)
    if unknown:
        raise click.BadParameter(f"unknown config keys: {', '.join(unknown)}", param=param)
    ctx.default_map = {**(ctx.default_map or {}), **{by_flag[k]: v for k, v in raw.items()}}
    return value


config_option = click.option(
    "--config", type=click.Path(dir_okay=False), callback=_load_config, is_eager=True,
    expose_value=False, help="key = value file; flags override it.")


def _attack_options(f):
    opts = [
        click.option("--dataset", required=True, type=click.Path(), help="Dataset root."),
        click.option("--split", default="test", show_default=True),
        click.option("--frames", "frames", default="bo", show_default=True,
                     help="Frame policy: bo | first | brute | fixed:<i>."),
        click.option("--k", "k", default=1, show_default=True, type=int, help="Frames to attack."),
        click.option("--mode", default="combined", show_default=True,
                     type=click.Choice(["noise", "spatial", "combined",
                                        "noise_only", "spatial_only"])),
        click.option("--lambda", "lam", type=float, default=None,
                     help="Similarity weight (default depends on the architecture)."),
        click.option("--lr", type=float, default=0.01, show_default=True),
        click.option("--max-iters", type=int, default=100, show_default=True),
        click.option("--budget", default=None, help="l21:<v> or ssim:<v>."),
        click.option("--bo-init", type=int, default=3, show_default=True),
        click.option("--bo-max-evals", type=int, default=None, help="Default min(T, 15)."),
        click.option("--bo-inner-iters", type=int, default=5, show_default=True),
        click.option("--limit", type=int, default=None, help="Attack only the first N videos."),
        click.option("--seed", type=int, default=0, show_default=True),
        click.option("--jobs", type=int, default=None, help="Worker processes (default: cores)."),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return config_option(f)


def _attack_config(lam, lr, max_iters, budget, bo_init, bo_max_evals, bo_inner_iters,
                   seed, mode) -> AttackConfig:
    bo = BoConfig(init_samples=bo_init, max_evals=bo_max_evals, inner_iters=bo_inner_iters, seed=seed)
    return AttackConfig(lam=lam, lr=lr, max_iters=max_iters,
                        budget=Budget.parse(budget) if budget else None,
                        bo=bo, seed=seed, mode=mode)


def _records(dataset: str, split: str, limit: int | None):
    records = load_dataset(dataset, split)
    return records[:limit] if limit is not None else records


def _jobs(jobs: int | None) -> int:
    return jobs if jobs is not None else (os.cpu_count() or 1)


def _summary_row(results, d_max: float, distance: str) -> dict:
    return {
        "n": len(results),
        "fr": fooling_rate(results),
        "ani": ani(results),
        "aap": aap(MetricsInput(results, d_max, distance)),
        "asp": asp(results),
    }


@click.group()
def cli():
    """Sparse adversarial video attacks on toy classifiers."""


@cli.command("gen")
@config_option
@click.option("--out", required=True, type=click.Path(), help="Dataset root directory.")
@click.option("--split", default="test", show_default=True)
@click.option("--num-videos", type=int, default=200, show_default=True)
@click.option("--num-frames", type=int, default=16, show_default=True)
@click.option("--height", type=int, default=16, show_default=True)
@click.option("--width", type=int, default=16, show_default=True)
@click.option("--channels", type=int, default=3, show_default=True)
@click.option("--num-classes", type=int, default=4, show_default=True)
@click.option("--shape-size", type=int, default=4, show_default=True)
@click.option("--noise-level", type=float, default=0.1, show_default=True)
@click.option("--informative", default=None, help="Comma-separated frames that show the shape.")
@click.option("--seed", type=int, default=7, show_default=True)
@click.option("--export-pnm", "pnm_dir", type=click.Path(), default=None,
              help="Also dump frames as PGM/PPM.")
def cmd_gen(out, split, num_videos, num_frames, height, width, channels, num_classes,
            shape_size, noise_level, informative, seed, pnm_dir):
    """Generate a synthetic moving-shape dataset."""
    cfg = SynthConfig(num_videos=num_videos, T=num_frames, W=width, H=height, C=channels,
                      num_classes=num_classes, shape_size=shape_size, noise_level=noise_level,
                      informative_frames=parse_int_list(informative), seed=seed)
    records = generate_synthetic_dataset(cfg)
    path = save_dataset(records, out, split)
    if pnm_dir:
        export_pnm(records, pnm_dir)
    click.echo(f"wrote {len(records)} videos to {path}")


@cli.command("train")
@config_option
@click.option("--dataset", required=True, type=click.Path())
@click.option("--split", default="train", show_default=True)
@click.option("--arch", required=True, type=click.Choice(ARCHS))
@click.option("--epochs", type=int, default=30, show_default=True)
@click.option("--lr", type=float, default=1e-3, show_default=True)
@click.option("--batch-size", type=int, default=8, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(), help="Model directory.")
def cmd_train(dataset, split, arch, epochs, lr, batch_size, seed, out):
    """Train a toy classifier and write it with its accuracy log."""
    records = load_dataset(dataset, split)
    T, H, W, C = records[0].video.shape
    num_classes = max(r.label for r in records) + 1
    spec = init_classifier(arch, (T, H, W, C), num_classes, seed=seed)
    spec, history = train(spec, records, epochs=epochs, lr=lr, batch_size=batch_size, seed=seed,
                          log=lambda row: click.echo(
                              f"epoch {row['epoch']}\tloss {row['loss']:.6f}\tacc {row['accuracy']:.4f}"))
    d = save_classifier(spec, out)
    lines = ["epoch\tloss\taccuracy"] + [f"{h['epoch']}\t{h['loss']:.10g}\t{h['accuracy']:.6f}"
                                         for h in history]
    (d / "train_log.tsv").write_text("\n".join(lines) + "\n")


@cli.command("attack")
@_attack_options
@click.option("--model", required=True, type=click.Path())
@click.option("--repeats", type=int, default=1, show_default=True)
@click.option("--out", required=True, type=click.Path(), help="Output directory.")
@click.option("--save-adv/--no-save-adv", default=False, help="Write adversarial videos as SAVT.")
@click.option("--timing/--no-timing", default=False, help="Record wall_ms (breaks byte-identity).")
@click.option("--dmax", type=float, default=0.1, show_default=True, help="AAP ceiling.")
@click.option("--distance", type=click.Choice(["ssim", "l21"]), default="ssim", show_default=True)
def cmd_attack(dataset, split, frames, k, mode, lam, lr, max_iters, budget, bo_init,
               bo_max_evals, bo_inner_iters, limit, seed, jobs, model, repeats, out,
               save_adv, timing, dmax, distance):
    """Run the sparse attack on every video and write result rows plus a summary."""
    spec = load_classifier(model)
    records = _records(dataset, split, limit)
    if not records:
        raise click.ClickException(f"no videos in {dataset}/{split}")
    model_name = Path(model).name
    mode = normalize_mode(mode)
    dist_kind = "ssim_distance" if distance == "ssim" else "l21"
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    summaries = []
    for r in range(repeats):
        cfg = _attack_config(lam, lr, max_iters, budget, bo_init, bo_max_evals, bo_inner_iters,
                             seed + r, mode)
        outcomes = run_attacks(records, spec, cfg, frames, k, _jobs(jobs))
        rows = result_rows(outcomes, model_name, frames, mode, k, timing)
        target = out if repeats == 1 else out / f"repeat_{r:02d}"
        target.mkdir(parents=True, exist_ok=True)
        (target / "results.csv").write_text(rows_to_csv(rows))
        masks = "".join(f"{o.id}\t{','.join(str(t) for t in np.flatnonzero(o.result.mask))}\n"
                        for o in outcomes)
        (target / "masks.tsv").write_text(masks)
        if save_adv:
            adv_dir = target / "adv"
            adv_dir.mkdir(exist_ok=True)
            for o in outcomes:
                write_tensor(adv_dir / f"{o.id}.savt", o.result.adversarial)
        summaries.append(_summary_row([o.result for o in outcomes], dmax, dist_kind))
    lines = ["repeat\tn\tfr\tani\taap\tasp"]
    for r, s in enumerate(summaries):
        lines.append(f"{r}\t{s['n']}\t{fmt(s['fr'])}\t{fmt(s['ani'])}\t{fmt(s['aap'])}\t{fmt(s['asp'])}")
    if repeats > 1:
        for label, idx in (("mean", 0), ("ci99", 1)):
            cells = []
            for key in ("fr", "ani", "aap", "asp"):
                vals = [s[key] for s in summaries if s[key] is not None]
                cells.append(fmt(normal_ci99(vals)[idx]) if vals else "-")
            lines.append(f"{label}\t{summaries[0]['n']}\t" + "\t".join(cells))
    (out / "summary.tsv").write_text("\n".join(lines) + "\n")
    click.echo("\n".join(lines))


@cli.command("sweep")
@_attack_options
@click.option("--model", required=True, type=click.Path())
@click.option("--param", type=click.Choice(["lambda", "budget"]), required=True)
@click.option("--values", required=True, help="Comma-separated values, e.g. 0.8,1.0,1.5 or ssim:0.94,ssim:0.96.")
@click.option("--out", required=True, type=click.Path(), help="Output CSV file.")
@click.option("--dmax", type=float, default=0.1, show_default=True)
def cmd_sweep(dataset, split, frames, k, mode, lam, lr, max_iters, budget, bo_init, bo_max_evals,
              bo_inner_iters, limit, seed, jobs, model, param, values, out, dmax):
    """Tabulate FR/ANI/ASP/AAP over lambda values or budgets."""
    spec = load_classifier(model)
    records = _records(dataset, split, limit)
    if not records:
        raise click.ClickException(f"no videos in {dataset}/{split}")
    mode = normalize_mode(mode)
    lines = ["param,value,n,fr,ani,asp,aap,mean_ssim_distance,mean_l21_distance"]
    for value in (v.strip() for v in values.split(",") if v.strip()):
        this_lam = float(value) if param == "lambda" else lam
        this_budget = value if param == "budget" else budget
        cfg = _attack_config(this_lam, lr, max_iters, this_budget, bo_init, bo_max_evals,
                             bo_inner_iters, seed, mode)
        results = [o.result for o in run_attacks(records, spec, cfg, frames, k, _jobs(jobs))]
        d_max = dmax
        kind = "ssim_distance"
        if cfg.budget is not None:
            kind = "ssim_distance" if cfg.budget.kind == "ssim" else "l21"
            d_max = 1 - cfg.budget.value if cfg.budget.kind == "ssim" else cfg.budget.value
        s = _summary_row(results, d_max, kind)
        lines.append(",".join([
            param, value, str(s["n"]), fmt(s["fr"]), fmt(s["ani"]), fmt(s["asp"]), fmt(s["aap"]),
            fmt(float(np.mean([r.ssim_distance for r in results]))),
            fmt(float(np.mean([r.l21_distance for r in results]))),
        ]))
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    Path(out).write_text("\n".join(lines) + "\n")
    click.echo("\n".join(lines))


@cli.command("transfer")
@_attack_options
@click.option("--models", required=True, help="Comma-separated model directories.")
@click.option("--out", required=True, type=click.Path(), help="Output CSV file.")
def cmd_transfer(dataset, split, frames, k, mode, lam, lr, max_iters, budget, bo_init,
                 bo_max_evals, bo_inner_iters, limit, seed, jobs, models, out):
    """Cross-model fooling-rate matrix (rows attack, columns are targets)."""
    paths = [p.strip() for p in models.split(",") if p.strip()]
    specs = [load_classifier(p) for p in paths]
    records = _records(dataset, split, limit)
    cfg = _attack_config(lam, lr, max_iters, budget, bo_init, bo_max_evals, bo_inner_iters,
                         seed, normalize_mode(mode))
    matrix = transfer_matrix(specs, records, cfg, names=[Path(p).name for p in paths],
                             policy=frames, k=k, jobs=_jobs(jobs))
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    Path(out).write_text(matrix.to_csv())
    click.echo(matrix.to_csv(), nl=False)


@cli.command("report")
@config_option
@click.option("--results", "results_files", required=True, multiple=True, type=click.Path(),
              help="results.csv files (repeatable).")
@click.option("--out", required=True, type=click.Path(), help="Output directory.")
@click.option("--dmax", type=float, default=0.1, show_default=True)
@click.option("--distance", type=click.Choice(["ssim", "l21"]), default="ssim", show_default=True)
def cmd_report(results_files, out, dmax, distance):
    """Aggregate result rows into metric tables and FR-vs-frames curves."""
    rows = []
    for path in results_files:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"missing results file: {p}")
        rows.extend(read_rows(p.read_text()))
    if not rows:
        raise click.ClickException("no result rows to report")
    kind = "ssim_distance" if distance == "ssim" else "l21"
    groups: dict[tuple, list] = defaultdict(list)
    for row in rows:
        groups[(row["model"], row["frame_policy"], row["mode"], int(row["k"]))].append(row_result(row))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["model,frame_policy,mode,k,n,fr,ani,aap,asp"]
    curves: dict[tuple, list] = defaultdict(list)
    for key in sorted(groups):
        s = _summary_row(groups[key], dmax, kind)
        lines.append(",".join([key[0], key[1], key[2], str(key[3]), str(s["n"]), fmt(s["fr"]),
                               fmt(s["ani"]), fmt(s["aap"]), fmt(s["asp"])]))
        curves[key[:3]].append((key[3], s["fr"]))
    (out / "report.csv").write_text("\n".join(lines) + "\n")
    for (model, policy, mode), pts in sorted(curves.items()):
        name = f"fr_vs_frames__{model}__{policy.replace(':', '-')}__{mode}.tsv"
        body = "frames\tfr\n" + "".join(f"{x}\t{fmt(y)}\n" for x, y in sorted(pts))
        (out / name).write_text(body)
    click.echo("\n".join(lines))


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="sava", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        _error("aborted", "interrupted")
        return 1
    except click.ClickException as exc:
        _error(type(exc).__name__, exc.format_message())
        return exc.exit_code or 1
    except FileNotFoundError as exc:
        _error("missing_path", str(exc))
        return 1
    except (ContainerError, ValueError, OSError) as exc:
        _error(type(exc).__name__, str(exc))
        return 1
    return 0


def _error(kind: str, message: str) -> None:
    one_line = " ".join(str(message).split())
    sys.stderr.write(f"error\t{kind}\t{one_line}\n")


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
