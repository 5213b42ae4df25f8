"""Command line entry point.

Every subcommand takes a ``key = value`` config file (``--config``) and/or
``--set key=value`` overrides, writes its outputs under ``output`` and copies
the effective config to ``config.snapshot`` there.

Output layout::

    <output>/config.snapshot   effective configuration
    <output>/results.csv       per-subcommand table (see each command)
    <output>/private/          private samples (PGM/PPM)
    <output>/partials/         partial-reconstruction grids and raw FIDU tensors
    <output>/candidates/       candidate reconstructions
    <output>/models/           victim / generator snapshots (FIDM)

Exit codes: 0 success, 2 configuration or I/O error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import attack, evalkit, genrec
from .config import ConfigError, ExperimentConfig
from .data_io import DataFormatError, emit_image, load_dataset, split_auxiliary, tile_grid
from .fed_sim import ClientConfig, accuracy, client_train
from .nn import ShapeError, load_model, save_model, save_tensors, tree_map

log = logging.getLogger("fidel")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
GRID_TILES = 24


class Run:
    """Shared state of one subcommand invocation."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg.validate()
        self.out = Path(cfg.output)
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.snapshot").write_text(cfg.dumps())
        self._data = None

    @property
    def data(self):
        """``(train, private_pool, auxiliary)``."""
        if self._data is None:
            cfg = self.cfg
            train = load_dataset(cfg.dataset, "train", cfg.data_root)
            aux, pool = split_auxiliary(load_dataset(cfg.dataset, "test", cfg.data_root))
            self._data = (train, pool, aux)
        return self._data

    @property
    def activation(self):
        return self.cfg.activations[0]

    @property
    def dropout(self):
        return self.cfg.dropouts[0]

    def victim(self):
        cfg = self.cfg
        if cfg.victim_path:
            return load_model(cfg.victim_path)
        model = evalkit.prepare_victim(cfg, self.activation, self.dropout, self.data[0])
        _check_finite(model.params, "pretrained victim")
        return model

    def generator(self, victim):
        cfg = self.cfg
        if cfg.arch != "cnn":
            return None
        if cfg.generator_path:
            return genrec.load_generator(cfg.generator_path)
        return evalkit.fit_generator(cfg, victim, self.data[2])

    def write_csv(self, name, header, rows):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        (self.out / name).write_text(buf.getvalue())


def _check_finite(tree, what):
    bad = []
    tree_map(lambda v: bad.append(not np.all(np.isfinite(v))), tree)
    if any(bad):
        raise evalkit.NumericalError(f"{what} contains NaN or infinity")


def _fmt(x):
    return f"{x:.6f}"


def _private_round(run: Run, victim, n):
    """Train one client on ``n`` private samples drawn from the pool with the config seed."""
    cfg = run.cfg
    pool = run.data[1]
    seq = evalkit.round_seed(cfg, run.activation, run.dropout, n, 0)
    indices = np.sort(np.random.default_rng(seq).choice(len(pool), size=n, replace=False))
    local = pool.subset(indices)
    client = ClientConfig(n=n, batch_size=cfg.client_batch(n), lr=cfg.lr, seed=int(seq.generate_state(1)[0]))
    _, update = client_train(victim, local, client)
    _check_finite(update.deltas, "model update")
    return indices, local, update


def _dump_partials(run: Run, partials, name="grid"):
    tensors = {f"neuron_{p.neuron:03d}": p.values for p in partials}
    save_tensors(run.out / "partials" / "partials.fidu", tensors,
                 {"kinds": [p.kind for p in partials], "bias_delta": [p.bias_delta for p in partials]})
    shown = partials[:GRID_TILES]
    if shown[0].values.shape[-1] in (1, 3):
        tiles = [p.values for p in shown]
    else:
        # convolutional features: first channels of the most confident neuron
        exact = [p for p in partials if p.kind == attack.EXACT]
        best = max(exact, key=lambda p: abs(p.bias_delta)) if exact else shown[0]
        tiles = [best.values[..., k] for k in range(min(GRID_TILES, best.values.shape[-1]))]
    grid = tile_grid(tiles, cols=8)
    emit_image(grid, run.out / "partials" / f"{name}.{_ext(grid)}")


def _ext(image):
    return "pgm" if image.shape[-1] == 1 else "ppm"


def cmd_demo_single(run: Run):
    """Private sample, first 24 partials, best candidate and per-neuron |r|."""
    victim = run.victim()
    generator = run.generator(victim)
    indices, local, update = _private_round(run, victim, 1)
    sample = local.take([0])[0][0]
    partials = attack.extract_partials(update, victim)
    _dump_partials(run, partials)
    emit_image(sample, run.out / "private" / f"sample.{_ext(sample)}")

    rows = []
    for p in partials:
        if generator is None:
            candidate = p.values
        elif p.kind == attack.EXACT:
            candidate = genrec.generate(generator, p.values, run.cfg.renormalize)
        else:
            candidate = None
        r = abs(evalkit.pearson(candidate, sample)) if candidate is not None else float("nan")
        rows.append([p.neuron, p.kind, int(p.dead), f"{p.bias_delta:.6e}", "" if np.isnan(r) else _fmt(r)])
    best = attack.reconstruct_single(partials)
    if generator is not None:
        best = genrec.generate(generator, best, run.cfg.renormalize)
    _check_finite([{"best": best}], "candidate")
    emit_image(best, run.out / "candidates" / f"best.{_ext(best)}", normalize=generator is None)
    run.write_csv("results.csv", ["neuron", "kind", "dead", "bias_delta", "abs_r"], rows)
    best_r = abs(evalkit.pearson(best, sample))
    (run.out / "metrics.tsv").write_text(f"test_index\t{indices[0] + len(run.data[2])}\nbest_abs_r\t{best_r:.6f}\n")
    print(f"best candidate |r| = {best_r:.6f}")
    return best_r


def cmd_demo_batch(run: Run):
    """Batch mosaic, partial grid, candidate mosaic and a per-sample best-|r| table."""
    n = run.cfg.n_values[0]
    if n < 2:
        raise ConfigError("demo-batch needs n_values >= 2")
    victim = run.victim()
    generator = run.generator(victim)
    indices, local, update = _private_round(run, victim, n)
    private, labels = local.take(np.arange(n))
    partials = attack.extract_partials(update, victim)
    _dump_partials(run, partials)
    emit_image(tile_grid(list(private), cols=10, normalize_each=False), run.out / "private" / f"batch.{_ext(private[0])}")

    candidates = evalkit.candidates_from_update(update, victim, generator, run.cfg.renormalize)
    _check_finite([{"c": candidates}], "candidates")
    if len(candidates):
        mosaic = tile_grid(list(candidates), cols=16, normalize_each=generator is None)
        emit_image(mosaic, run.out / "candidates" / f"mosaic.{_ext(candidates[0])}")
    m = evalkit.match_candidates(candidates, private, run.cfg.threshold)
    rows = [[k, indices[k] + len(run.data[2]), labels[k], _fmt(m.best_abs_r[k]), int(m.revealed[k])] for k in range(n)]
    run.write_csv("results.csv", ["sample", "test_index", "label", "best_abs_r", "revealed"], rows)
    print(f"{m.count} of {n} samples revealed by {len(candidates)} candidates")
    return m


def cmd_sweep(run: Run):
    cfg = run.cfg
    victims = None
    if cfg.victim_path:
        victims = {(a, d): load_model(cfg.victim_path) for a in cfg.activations for d in cfg.dropouts}
    factory = (lambda victim: genrec.load_generator(cfg.generator_path)) if cfg.generator_path else None
    report = evalkit.run_sweep(cfg, run.data, victims, factory)
    report.write(run.out)
    sys.stdout.write(report.summary_csv())
    return report


def cmd_pretrain(run: Run):
    victim = run.victim()
    path = save_model(victim, run.out / "models" / "victim.fidm")
    acc = accuracy(victim, run.data[1])
    run.write_csv("results.csv", ["dataset", "arch", "activation", "dropout", "epochs", "pool_accuracy"],
                  [[run.cfg.dataset, run.cfg.arch, run.activation, int(run.dropout), run.cfg.pretrain_epochs,
                    _fmt(acc)]])
    print(f"victim saved to {path} (accuracy on the private pool {acc:.4f})")
    return victim


def cmd_train_generator(run: Run):
    if run.cfg.arch != "cnn":
        raise ConfigError("train-generator needs arch = cnn")
    victim = run.victim()
    save_model(victim, run.out / "models" / "victim.fidm")
    gen = evalkit.fit_generator(run.cfg, victim, run.data[2])
    _check_finite(gen.model.params, "generator")
    path = genrec.save_generator(gen, run.out / "models" / "generator.fidm")
    rows = [[k + 1, f"{v:.8f}"] for k, v in enumerate(gen.loss_curve)]
    run.write_csv("results.csv", ["epoch", "train_mse"], rows)
    (run.out / "metrics.tsv").write_text(f"epochs\t{gen.epochs}\nval_mse\t{gen.val_mse:.8f}\n")
    print(f"generator saved to {path}: {gen.epochs} epochs, validation mse {gen.val_mse:.5f}")
    return gen


def cmd_make_surrogate(args):
    from .surrogate import ensure_surrogate

    root = ensure_surrogate(args.root, seed=args.seed)
    print(f"stand-in datasets ready under {root}")


COMMANDS = {
    "demo-single": (cmd_demo_single, "single-sample round: partials and best candidate"),
    "demo-batch": (cmd_demo_batch, "multi-sample round: partial grid, candidate mosaic, per-sample |r|"),
    "sweep": (cmd_sweep, "reveal counts over many rounds (results.csv, summary.csv, plot.tsv)"),
    "pretrain": (cmd_pretrain, "pretrain a victim and save it"),
    "train-generator": (cmd_train_generator, "train the feature-to-image generator for a CNN victim"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="fidel", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--out", help="output directory (config key: output)")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, help="worker threads for sweeps")
        p.add_argument("--data-root", help="dataset directory (default: $FIDEL_DATA_ROOT)")
    p = sub.add_parser("make-surrogate", help="write stand-in MNIST / CIFAR-10 files in the canonical formats")
    p.add_argument("root")
    p.add_argument("--seed", type=int, default=0)
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    cfg = cfg.override(args.set)
    flags = {"output": args.out, "seed": args.seed, "threads": args.threads, "data_root": args.data_root}
    return cfg.override(f"{k}={v}" for k, v in flags.items() if v is not None)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "make-surrogate":
            cmd_make_surrogate(args)
            return EXIT_OK
        cfg = resolve_config(args)
        if args.command == "demo-single":
            cfg = cfg.override(["n_values=1"])
        COMMANDS[args.command][0](Run(cfg))
    except (evalkit.NumericalError, FloatingPointError) as exc:
        print(f"fidel: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DataFormatError, ShapeError, OSError, ValueError) as exc:
        print(f"fidel: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
