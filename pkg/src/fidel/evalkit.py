"""Leakage metrics and the reveal-count sweeps.

A private sample counts as fully revealed when some candidate reconstruction
has ``|pearson r| >= 0.98`` against it. Every candidate votes only for its best
match and each sample is counted once per round.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attack import locate_first_dense, partial_matrix
from .config import ExperimentConfig
from .fed_sim import ClientConfig, client_train, pretrain, server_aggregate
from .nn import build_victim, tree_norm, tree_sub

log = logging.getLogger(__name__)

THRESHOLD = 0.98


class NumericalError(RuntimeError):
    """A NaN or infinity appeared where finite values are required."""


# -- correlation ------------------------------------------------------------------


def pearson(a, b) -> float:
    """Sample Pearson correlation of two flattened tensors; ``nan`` if either is constant."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size or a.size < 2:
        raise ValueError(f"need two equal-length inputs of size >= 2, got {a.size} and {b.size}")
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt(float(da @ da) * float(db @ db))
    if denom == 0.0:
        return math.nan
    return max(-1.0, min(1.0, float(da @ db) / denom))


def pearson_matrix(candidates, samples) -> np.ndarray:
    """``r[i, j]`` between candidate ``i`` and sample ``j``; constant rows give 0."""
    c = np.asarray(candidates, dtype=np.float64).reshape(len(candidates), -1)
    s = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
    c = c - c.mean(axis=1, keepdims=True)
    s = s - s.mean(axis=1, keepdims=True)
    cn, sn = np.linalg.norm(c, axis=1), np.linalg.norm(s, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = (c @ s.T) / np.outer(cn, sn)
    r[~np.isfinite(r)] = 0.0
    return np.clip(r, -1.0, 1.0)


@dataclass
class Matching:
    revealed: np.ndarray  # bool per private sample
    best_abs_r: np.ndarray  # best |r| per private sample over all candidates
    candidate_match: np.ndarray  # argmax-|r| sample per candidate
    candidate_abs_r: np.ndarray

    @property
    def count(self) -> int:
        return int(self.revealed.sum())


def match_candidates(candidates, private, threshold=THRESHOLD) -> Matching:
    n = len(private)
    if n == 0:
        raise ValueError("empty private batch")
    if len(candidates) == 0:
        zeros = np.zeros(0)
        return Matching(np.zeros(n, bool), np.zeros(n), zeros.astype(int), zeros)
    r = np.abs(pearson_matrix(candidates, private))
    match = r.argmax(axis=1)
    match_r = r[np.arange(len(r)), match]
    revealed = np.zeros(n, bool)
    revealed[match[match_r >= threshold]] = True
    return Matching(revealed, r.max(axis=0), match, match_r)


def count_revealed(candidates, private, threshold=THRESHOLD) -> int:
    """Number of distinct private samples fully revealed by the candidates."""
    return match_candidates(candidates, private, threshold).count


# -- sweeps -----------------------------------------------------------------------


@dataclass
class RoundResult:
    indices: np.ndarray
    revealed: int
    mean_abs_r_best: float
    candidates: int


@dataclass
class CellReport:
    activation: str
    dropout: bool
    n: int
    rounds: list = field(default_factory=list)

    @property
    def counts(self) -> np.ndarray:
        return np.array([r.revealed for r in self.rounds], dtype=float)

    @property
    def mean(self) -> float:
        return float(self.counts.mean())

    @property
    def stderr(self) -> float:
        c = self.counts
        return float(c.std(ddof=1) / math.sqrt(len(c))) if len(c) > 1 else 0.0


@dataclass
class RevealReport:
    config: ExperimentConfig
    cells: list = field(default_factory=list)

    def cell(self, activation, dropout, n) -> CellReport:
        for c in self.cells:
            if (c.activation, c.dropout, c.n) == (activation, dropout, n):
                return c
        raise KeyError((activation, dropout, n))

    def results_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dataset", "arch", "activation", "dropout", "n", "round", "revealed", "mean_abs_r_best"])
        cfg = self.config
        for c in self.cells:
            for k, r in enumerate(c.rounds):
                w.writerow([cfg.dataset, cfg.arch, c.activation, int(c.dropout), c.n, k, r.revealed,
                            f"{r.mean_abs_r_best:.6f}"])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dataset", "arch", "activation", "dropout", "n", "rounds", "mean", "stderr"])
        cfg = self.config
        for c in self.cells:
            w.writerow([cfg.dataset, cfg.arch, c.activation, int(c.dropout), c.n, len(c.rounds),
                        f"{c.mean:.6f}", f"{c.stderr:.6f}"])
        return buf.getvalue()

    def plot_tsv(self) -> str:
        """Mean revealed per local dataset size, one column per (activation, dropout) curve."""
        curves = sorted({(c.activation, c.dropout) for c in self.cells}, key=lambda k: (k[0], not k[1]))
        ns = sorted({c.n for c in self.cells})
        lines = ["n\t" + "\t".join(f"{a}{'+dropout' if d else ''}" for a, d in curves)]
        for n in ns:
            row = [str(n)]
            for a, d in curves:
                try:
                    row.append(f"{self.cell(a, d, n).mean:.6f}")
                except KeyError:
                    row.append("")
            lines.append("\t".join(row))
        return "\n".join(lines) + "\n"

    def write(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "results.csv").write_text(self.results_csv())
        (directory / "summary.csv").write_text(self.summary_csv())
        (directory / "plot.tsv").write_text(self.plot_tsv())
        return directory


def round_seed(cfg: ExperimentConfig, activation, dropout, n, round_index) -> np.random.SeedSequence:
    key = [cfg.seed, ord(activation[0]), int(dropout), n, round_index]
    return np.random.SeedSequence(key)


def candidates_from_update(update, victim, generator=None, renormalize=False):
    """Candidate reconstructions in input space from one update.

    Fully connected victims: the exact partials themselves. Convolutional
    victims: the generator's output for every exact partial.
    """
    rows, exact, _, _ = partial_matrix(update, victim)
    _, shape = locate_first_dense(victim)
    rows = rows[exact].reshape(-1, *shape)
    if generator is None:
        return rows
    from .genrec import generate

    if not len(rows):
        return np.zeros((0, *generator.model.output_shape))
    return generate(generator, rows, renormalize=renormalize)


def measure_round(victim, pool, cfg: ExperimentConfig, activation, dropout, n, round_index, generator=None):
    seq = round_seed(cfg, activation, dropout, n, round_index)
    rng = np.random.default_rng(seq)
    indices = np.sort(rng.choice(len(pool), size=n, replace=False))
    local = pool.subset(indices)
    client = ClientConfig(n=n, batch_size=cfg.client_batch(n), lr=cfg.lr, seed=int(seq.generate_state(1)[0]))
    _, update = client_train(victim, local, client, round_index=round_index)
    candidates = candidates_from_update(update, victim, generator, cfg.renormalize)
    if not np.all(np.isfinite(candidates)):
        raise NumericalError(f"non-finite candidate in round {round_index} (n={n})")
    private, _ = local.take(np.arange(n))
    m = match_candidates(candidates, private, cfg.threshold)
    result = RoundResult(indices, m.count, float(m.best_abs_r.mean()), len(candidates))
    return result, update


def prepare_victim(cfg: ExperimentConfig, activation, dropout, train):
    victim = build_victim(cfg.arch, cfg.dataset, activation, cfg.dropout_rate if dropout else 0.0, cfg.seed)
    return pretrain(victim, train, cfg.pretrain_epochs, seed=cfg.seed, log=log.info)


def run_sweep(cfg: ExperimentConfig, data=None, victims=None, generator_factory=None) -> RevealReport:
    """Reveal counts for every (activation, dropout, n) cell over ``cfg.rounds`` rounds.

    ``data`` is ``(train, private_pool, auxiliary)``; loaded from ``cfg.data_root``
    when omitted. ``victims`` may map ``(activation, dropout)`` to pretrained
    models to skip pretraining.
    """
    from .data_io import load_dataset, split_auxiliary

    cfg.validate()
    if data is None:
        train = load_dataset(cfg.dataset, "train", cfg.data_root)
        aux, pool = split_auxiliary(load_dataset(cfg.dataset, "test", cfg.data_root))
    else:
        train, pool, aux = data
    victims = dict(victims or {})
    report = RevealReport(cfg)
    for activation in cfg.activations:
        for dropout in cfg.dropouts:
            base = victims.get((activation, dropout))
            if base is None:
                base = prepare_victim(cfg, activation, dropout, train)
                victims[(activation, dropout)] = base
            generator = None
            if cfg.arch == "cnn":
                generator = fit_generator(cfg, base, aux, generator_factory)
            for n in cfg.n_values:
                cell = CellReport(activation, dropout, n)
                if cfg.continue_training:
                    cell.rounds = _continuing_rounds(cfg, base, pool, aux, activation, dropout, n, generator,
                                                     generator_factory)
                else:
                    def one(k, base=base, n=n, generator=generator, activation=activation, dropout=dropout):
                        return measure_round(base, pool, cfg, activation, dropout, n, k, generator)[0]

                    if cfg.threads > 1:
                        with ThreadPoolExecutor(cfg.threads) as ex:
                            cell.rounds = list(ex.map(one, range(cfg.rounds)))
                    else:
                        cell.rounds = [one(k) for k in range(cfg.rounds)]
                log.info("%s dropout=%s n=%d: mean revealed %.3f +- %.3f", activation, dropout, n,
                         cell.mean, cell.stderr)
                report.cells.append(cell)
    return report


def fit_generator(cfg, victim, aux, factory=None):
    if factory is not None:
        return factory(victim)
    from .genrec import build_pairs, train_generator

    return train_generator(build_pairs(victim, aux), cfg.dataset, epochs=cfg.generator_epochs or None,
                           time_budget=cfg.generator_budget or None, batch_size=cfg.generator_batch,
                           seed=cfg.seed, lr=cfg.generator_lr, log=log.info)


def _continuing_rounds(cfg, base, pool, aux, activation, dropout, n, generator, factory):
    """The global model keeps training across rounds; the generator is refit when
    the victim drifts further than ``cfg.retrain_distance`` from the one it was fit on."""
    model, fitted_on, rounds = base.copy(), base, []
    for k in range(cfg.rounds):
        if generator is not None and tree_norm(tree_sub(model.params, fitted_on.params)) > cfg.retrain_distance:
            generator, fitted_on = fit_generator(cfg, model, aux, factory), model.copy()
        result, update = measure_round(model, pool, cfg, activation, dropout, n, k, generator)
        rounds.append(result)
        model = server_aggregate([update], model)
    return rounds
