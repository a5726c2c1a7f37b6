"""``milpool`` command line: generate, train, eval, cv, compare, sweep-bagsize.

Exit codes: 0 on success, 1 for usage and configuration errors, 2 for
failures while running (numerical trouble, diverged training, bad data
values).
"""

from __future__ import annotations

import csv
import json
import logging
import sys
from collections import Counter
from datetime import datetime, timezone
from pathlib import Path

import click

from . import __version__
from .config import PRESETS, ConfigError, ExperimentConfig, load_bags, load_config, make_split, save_config
from .data import BagCsvSchema, load_bag_csv, write_bag_csv
from .errors import LoadError, MilError, ParameterError, SpecError
from .experiments import SWEEP_FILTERS, SWEEP_SIZES, run_experiment, sweep_bag_sizes, write_confusion_csv, write_sweep
from .model import load_model, save_model
from .rng import RngStream
from .stats import mcnemar_test, paired_t_test
from .train import cross_validate, decode_value, encode_value, evaluate, write_history_csv

USAGE_ERRORS = (ConfigError, SpecError, ParameterError, LoadError)


class MilGroup(click.Group):
    """Maps exceptions onto the documented exit codes."""

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        try:
            rv = super().main(args, prog_name, complete_var, standalone_mode=False, **extra)
            code = rv if isinstance(rv, int) else 0
        except click.exceptions.Exit as exc:
            code = exc.exit_code
        except click.ClickException as exc:
            exc.show()
            code = 1
        except click.exceptions.Abort:
            click.echo("Aborted!", err=True)
            code = 1
        except USAGE_ERRORS as exc:
            click.echo(f"error: {exc}", err=True)
            code = 1
        except (MilError, ArithmeticError, OSError) as exc:
            click.echo(f"error: {exc}", err=True)
            code = 2
        if standalone_mode:
            sys.exit(code)
        return code


class Context:
    def __init__(self, config_path, preset, seed, jobs, out_dir, overrides):
        self.config_path = config_path
        self.preset = preset
        self.seed = seed
        self.jobs = jobs
        self.out_dir_flag = out_dir
        self.overrides = list(overrides)

    def config(self, extra=()) -> ExperimentConfig:
        cfg = load_config(self.config_path, self.preset, [*self.overrides, *extra])
        if self.out_dir_flag is not None:
            cfg.out_dir = self.out_dir_flag
        return cfg.validate()

    def out_dir(self, cfg: ExperimentConfig | None = None) -> Path:
        path = Path(self.out_dir_flag if self.out_dir_flag is not None else (cfg.out_dir if cfg else "out"))
        path.mkdir(parents=True, exist_ok=True)
        return path


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")


def _write_predictions(metrics, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bag_id", "truth", "prediction"])
        for bag_id, y, p in zip(metrics.bag_ids, metrics.truths, metrics.predictions):
            w.writerow([bag_id, encode_value(y), encode_value(p)])


def _write_metrics(metrics, out: Path, extra=None) -> None:
    d = metrics.to_dict()
    d.update(extra or {})
    _dump_json(d, out / "metrics.json")
    _write_predictions(metrics, out / "predictions.csv")
    if metrics.confusion is not None:
        write_confusion_csv(metrics.confusion, out / "confusion.csv")


@click.group(cls=MilGroup)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Experiment config JSON.")
@click.option("--preset", type=click.Choice(PRESETS), default=None,
              help="Built-in config used when --config is absent (default metal-balls).")
@click.option("--seed", type=int, default=0, show_default=True, help="Root seed for every random stream.")
@click.option("--jobs", type=click.IntRange(min=1), default=1, show_default=True, help="Worker processes for cv.")
@click.option("--out-dir", type=click.Path(file_okay=False), default=None, help="Output directory.")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
              help="Override a config entry, e.g. --set train.lr=0.01 (values parse as JSON).")
@click.option("-v", "--verbose", is_flag=True, help="Log training progress.")
@click.version_option(__version__, prog_name="milpool")
@click.pass_context
def cli(ctx, config_path, preset, seed, jobs, out_dir, overrides, verbose):
    """Multiple instance learning with pluggable pooling filters."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING, format="%(name)s: %(message)s")
    ctx.obj = Context(config_path, preset, seed, jobs, out_dir, overrides)


@cli.command()
@click.option("--bags-per-class", type=int, default=None, help="Metal-balls bags per production line.")
@click.option("--balls", type=int, default=None, help="Instances per bag.")
@click.option("--num-bags", type=int, default=None, help="Bag count for the mixture source.")
@click.pass_obj
def generate(obj: Context, bags_per_class, balls, num_bags):
    """Write a synthetic corpus as a bag CSV plus manifest.json."""
    extra = []
    if bags_per_class is not None:
        extra.append(f"data.bags_per_class={bags_per_class}")
    if balls is not None:
        extra.append(f"data.balls_per_bag={balls}")
    if num_bags is not None:
        extra.append(f"data.num_bags={num_bags}")
    cfg = obj.config(extra)
    if cfg.data["source"] not in ("metal_balls", "mixture"):
        raise ConfigError(f"generate needs a synthetic source (metal_balls or mixture), got {cfg.data['source']!r}")
    bags = load_bags(cfg, RngStream(obj.seed).child(0))
    out = obj.out_dir(cfg)
    key = cfg.task.kind
    write_bag_csv(bags, out / "bags.csv", key)
    counts = Counter(encode_value(b.label(key)) for b in bags)
    manifest = {
        "seed": obj.seed,
        "config": cfg.to_dict(),
        "num_bags": len(bags),
        "num_instances": int(sum(b.size for b in bags)),
        "label_key": key,
        "counts": dict(sorted(counts.items())),
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    _dump_json(manifest, out / "manifest.json")
    click.echo(f"wrote {len(bags)} bags to {out / 'bags.csv'}")


@cli.command()
@click.option("--max-epochs", type=int, default=None, help="Override train.max_epochs.")
@click.option("--pooling", type=str, default=None, help="Override model.pooling.kind.")
@click.pass_obj
def train(obj: Context, max_epochs, pooling):
    """Train one model; writes model.json, history.csv, metrics.json."""
    extra = []
    if max_epochs is not None:
        extra.append(f"train.max_epochs={max_epochs}")
    if pooling is not None:
        extra.append(f"model.pooling.kind={pooling}")
    cfg = obj.config(extra)
    res, m, split = run_experiment(cfg, obj.seed)
    out = obj.out_dir(cfg)
    save_config(cfg, out / "config.json")
    save_model(res.model, out / "model.json")
    write_history_csv(res.history, out / "history.csv")
    _write_metrics(m, out, {
        "split": "test",
        "epochs_run": res.epochs_run,
        "best_epoch": res.best_epoch,
        "monitor": res.monitor,
        "best_val_metric": res.best_metric,
        "sizes": {"train": len(split.train), "validation": len(split.validation), "test": len(split.test)},
    })
    name = "accuracy" if cfg.task.is_classification else "mae"
    click.echo(f"test {name}={m.score:.4f} loss={m.loss:.4f} after {res.epochs_run} epochs (best {res.best_epoch})")


@cli.command("eval")
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Bag CSV to score as-is. Default: rebuild the config's test split from --seed.")
@click.pass_obj
def eval_cmd(obj: Context, model_path, data_path):
    """Score a saved model; writes metrics.json, predictions.csv."""
    model = load_model(model_path)
    cfg = obj.config()
    task = model.task
    if data_path is not None:
        bags = load_bag_csv(data_path, BagCsvSchema(label_key=task.kind))
    else:
        rng = RngStream(obj.seed)
        bags = make_split(cfg, load_bags(cfg, rng.child(0)), rng.child(1)).test
    m = evaluate(model, bags, task, cfg.train.eval_resamples, RngStream(obj.seed).child(4), cfg.train.bag_size)
    out = obj.out_dir(cfg)
    _write_metrics(m, out, {"split": data_path or "test"})
    name = "accuracy" if task.is_classification else "mae"
    click.echo(f"{name}={m.score:.4f} loss={m.loss:.4f} on {len(bags)} bags")


@cli.command()
@click.option("--k", type=int, default=10, show_default=True)
@click.option("--repeats", type=int, default=5, show_default=True)
@click.pass_obj
def cv(obj: Context, k, repeats):
    """Repeated k-fold cross-validation; writes cv_folds.csv and cv_summary.json."""
    cfg = obj.config()
    rng = RngStream(obj.seed)
    bags = load_bags(cfg, rng.child(0))
    report = cross_validate(bags, cfg.model, cfg.train, k, repeats, rng.child(1), cfg.normalize, obj.jobs)
    out = obj.out_dir(cfg)
    report.write(out)
    s = report.summary()
    click.echo(f"{s['metric']}={s['mean']:.4f} +/- {s['stderr']:.4f} over {s['n_scores']} folds")


def _read_table(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise LoadError(f"{path}: no data rows")
    return rows


def _key(row):
    return tuple(row[c] for c in ("repeat", "fold", "bag_id") if c in row)


def _pair(path_a, path_b, columns):
    a, b = _read_table(path_a), _read_table(path_b)
    for path, rows in ((path_a, a), (path_b, b)):
        missing = [c for c in columns if c not in rows[0]]
        if missing:
            raise LoadError(f"{path}: missing columns {missing}")
    ia, ib = {_key(r): r for r in a}, {_key(r): r for r in b}
    if ia.keys() != ib.keys():
        only = sorted(ia.keys() ^ ib.keys())[:5]
        raise LoadError(f"{path_a} and {path_b} cover different samples, e.g. {only}")
    keys = sorted(ia)
    return [ia[k] for k in keys], [ib[k] for k in keys]


@cli.command()
@click.argument("preds_a", type=click.Path(exists=True, dir_okay=False))
@click.argument("preds_b", type=click.Path(exists=True, dir_okay=False))
@click.option("--mode", type=click.Choice(["mcnemar", "ttest"]), default="mcnemar", show_default=True)
@click.pass_obj
def compare(obj: Context, preds_a, preds_b, mode):
    """Paired test between two models' predictions on the same samples.

    Inputs are ``bag_id,truth,prediction`` CSVs (as written by train/eval/cv).
    ``ttest`` pairs the absolute errors; it also accepts ``repeat,fold,score``
    fold tables, pairing the fold scores.
    """
    if mode == "ttest" and "score" in _read_table(preds_a)[0]:
        ra, rb = _pair(preds_a, preds_b, ["score"])
        res = paired_t_test([float(r["score"]) for r in ra], [float(r["score"]) for r in rb])
    else:
        ra, rb = _pair(preds_a, preds_b, ["bag_id", "truth", "prediction"])
        truth = [decode_value(r["truth"]) for r in ra]
        if truth != [decode_value(r["truth"]) for r in rb]:
            raise LoadError("truth columns differ between the two files")
        pa = [decode_value(r["prediction"]) for r in ra]
        pb = [decode_value(r["prediction"]) for r in rb]
        if mode == "mcnemar":
            res = mcnemar_test(pa, pb, truth)
        else:
            try:
                ea = [abs(float(p) - float(y)) for p, y in zip(pa, truth)]
                eb = [abs(float(p) - float(y)) for p, y in zip(pb, truth)]
            except TypeError:
                raise ParameterError("ttest on predictions needs scalar labels") from None
            res = paired_t_test(ea, eb)
    d = {"mode": mode, "file_a": str(preds_a), "file_b": str(preds_b), **res.to_dict()}
    out = obj.out_dir()
    _dump_json(d, out / f"compare_{mode}.json")
    click.echo(json.dumps(d))


def _int_list(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {text!r}") from None


@cli.command("sweep-bagsize")
@click.option("--sizes", default=",".join(map(str, SWEEP_SIZES)), show_default=True, help="Bag sizes.")
@click.option("--filters", default=",".join(SWEEP_FILTERS), show_default=True, help="Pooling filters.")
@click.pass_obj
def sweep_bagsize(obj: Context, sizes, filters):
    """Test loss/accuracy for each (filter, bag size); writes sweep_bagsize.csv."""
    cfg = obj.config()
    if cfg.data["source"] not in ("metal_balls", "mixture"):
        raise ConfigError("sweep-bagsize needs a synthetic source (metal_balls or mixture)")
    filter_list = [f.strip() for f in filters.split(",") if f.strip()]
    rows = sweep_bag_sizes(cfg, _int_list(sizes), filter_list, obj.seed)
    out = obj.out_dir(cfg)
    write_sweep(rows, out)
    for r in rows:
        click.echo(f"{r['pooling']:<24} {r['bag_size']:>5}  loss={r['test_loss']:.4f}  acc={r['test_accuracy']:.4f}")


def main():
    cli.main(prog_name="milpool")


if __name__ == "__main__":
    main()
