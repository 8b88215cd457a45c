"""End-to-end runs, result directories and run comparison."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import attack as atk
from . import data as D
from . import engine
from . import metrics as M
from .config import ExperimentConfig, build_config, to_text
from .federation import Setup, SelectionPolicy, build_roster, prepare_state, run_round
from .models import build_model, init_params
from .svg import image_grid, line_chart
from .training import TrainParams

log = logging.getLogger(__name__)

CSV_HEADER = ("round", "mta", "tta", "gma", "train_loss", "adv_loss")
CONFIG_FILE = "config.txt"
METRICS_FILE = "metrics.csv"
PARAMS_FILE = "params.npy"
POISON_FILE = "poison.bin"
PLOT_FILE = "accuracy.svg"


@dataclass
class Workload:
    model: object
    train: D.LabeledDataset
    test: D.LabeledDataset
    clients: list


def load_datasets(config: ExperimentConfig):
    if config.dataset == "synthetic":
        side = config.synthetic_side
        full = D.make_synthetic(10, config.synthetic_per_class + config.synthetic_test_per_class,
                                (1, side, side), config.seed, noise=config.synthetic_noise,
                                spread=config.synthetic_spread)
        return D.train_test_split(full, config.synthetic_test_per_class, config.seed)
    directory = Path(config.data_dir)
    try:
        return D.load_idx_dir(directory, "train"), D.load_idx_dir(directory, "test")
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"{config.dataset} IDX files not found under {directory}: {exc.filename}") from None


def partition(config: ExperimentConfig, train: D.LabeledDataset) -> D.PartitionSpec:
    if config.partition == "iid":
        return D.iid_partition(len(train), config.num_clients, config.seed)
    return D.dirichlet_partition(train.labels, config.num_clients, config.alpha, config.seed)


def prepare(config: ExperimentConfig) -> Workload:
    train, test = load_datasets(config)
    model = build_model(config.model, train.image_shape, train.num_classes)
    part = partition(config, train)
    clients = [train.subset(part.assignments[k]) for k in range(config.num_clients)]
    return Workload(model, train, test, clients)


def attack_config(config: ExperimentConfig):
    if config.method == "none":
        return None
    return atk.AttackConfig(
        y_tar=config.y_tar, y_adv=config.y_adv, m_pct=config.m_pct, v=config.v,
        T=config.poison_steps, poison_lr=config.poison_lr, epsilon=config.epsilon,
        poison_count=config.poison_count, scheme=config.scheme, r_pre=config.r_pre,
        window=config.window(), method=config.method, reverse_direction=config.reverse_direction,
        sybil_weight=config.sybil_weight)


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return f"{x:.6f}"


def simulate(config: ExperimentConfig, progress=None):
    """Run the federation; returns (final state, workload). No files are written."""
    work = prepare(config)
    model = work.model
    pool = D.LabeledDataset(np.concatenate([c.images for c in work.clients]),
                            np.concatenate([c.labels for c in work.clients]))
    clean = config.method == "none"

    def evaluator(params, r):
        preds = engine.predict(model, params, work.test.images)
        mta, tta = M.target_metrics(preds, work.test.labels, config.y_tar, config.y_adv)
        acc = float(np.mean(preds == work.test.labels))
        return M.MetricsRecord(
            round=r, mta=mta, tta=tta, gma=acc if clean else None,
            train_loss=M.mean_loss(model, params, pool.images, pool.labels),
            adv_loss=M.adversarial_loss(model, params, work.test, config.y_tar, config.y_adv),
            accuracy=acc)

    attack = attack_config(config)
    num_malicious = config.num_malicious() if attack is not None else 0
    roster = build_roster(work.clients, num_malicious, config.v if attack is not None else 0)
    train = TrainParams(config.epochs, config.batch_size, config.lr, config.momentum)
    setup = Setup(model, train, config.seed, SelectionPolicy(config.participation), evaluator)
    state = prepare_state(init_params(model, config.seed), roster, setup, attack)
    for _ in range(config.rounds):
        state = run_round(state, setup, attack)
        if progress is not None:
            progress(state)
    return state, work


def read_metrics(run_dir) -> list[dict]:
    path = Path(run_dir) / METRICS_FILE
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        rows = []
        for row in reader:
            rows.append({k: (int(v) if k == "round" else (float(v) if v != "" else None)) for k, v in row.items()})
    return rows


def read_run_config(run_dir) -> ExperimentConfig:
    return build_config(Path(run_dir) / CONFIG_FILE)


def metrics_csv(history, gma=None) -> str:
    buf = io.StringIO()
    buf.write(",".join(CSV_HEADER) + "\n")
    for i, rec in enumerate(history):
        g = rec.gma if gma is None else gma[i]
        buf.write(",".join([str(rec.round), _fmt(rec.mta), _fmt(rec.tta), _fmt(g),
                            _fmt(rec.train_loss), _fmt(rec.adv_loss)]) + "\n")
    return buf.getvalue()


def run_experiment(config: ExperimentConfig, progress=None) -> Path:
    """Simulate and write the self-describing result directory."""
    config.validate()
    out = config.resolved_output()
    gma = None
    if config.gma_baseline:
        base = read_metrics(config.gma_baseline)
        if len(base) != config.rounds:
            raise ValueError(f"gma baseline {config.gma_baseline} has {len(base)} rounds, run has {config.rounds}")
        gma = [row["gma"] for row in base]
    state, work = simulate(config, progress)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / CONFIG_FILE).write_text(to_text(replace(config, output_dir=str(out))))
        (out / METRICS_FILE).write_text(metrics_csv(state.history, gma))
        np.save(out / PARAMS_FILE, state.params)
        if state.last_poison is not None:
            atk.save_poison(state.last_poison, out / POISON_FILE)
        rows = read_metrics(out)
        (out / PLOT_FILE).write_text(accuracy_plot(rows, config.method))
    except OSError as exc:
        raise OSError(f"writing results to {out}: {exc.strerror or exc}") from None
    return out


def accuracy_plot(rows, label="") -> str:
    xs = [r["round"] for r in rows]
    series = [("MTA", xs, [r["mta"] for r in rows]), ("TTA", xs, [r["tta"] for r in rows])]
    if any(r["gma"] is not None for r in rows):
        series.append(("GMA", xs, [r["gma"] for r in rows]))
    return line_chart(series, title=f"accuracy vs round ({label})", ylabel="accuracy")


def gma_run(config: ExperimentConfig) -> list:
    """Overall test accuracy per round of the attack-free run with the same seeds and clients."""
    state, _ = simulate(replace(config, method="none"))
    return [rec.accuracy for rec in state.history]


def compare_runs(run_dirs, out_dir=None):
    """Overlay MTA/TTA curves of several runs; returns (svg text, table rows)."""
    if len(run_dirs) < 2:
        raise ValueError("compare needs at least two run directories")
    runs = []
    for d in run_dirs:
        cfg = read_run_config(d)
        runs.append((cfg, read_metrics(d)))
    lengths = {len(rows) for _, rows in runs}
    if len(lengths) != 1:
        raise ValueError(f"round counts differ across runs: {sorted(lengths)}")
    series, table = [], []
    for d, (cfg, rows) in zip(run_dirs, runs):
        xs = [r["round"] for r in rows]
        label = cfg.method
        series.append((f"{label} MTA", xs, [r["mta"] for r in rows]))
        series.append((f"{label} TTA", xs, [r["tta"] for r in rows]))
        last = rows[-1]
        table.append({"run": str(d), "method": label, "mta": last["mta"], "tta": last["tta"]})
    svg = line_chart(series, title="method comparison", ylabel="accuracy")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "compare.svg").write_text(svg)
        (out / "compare.csv").write_text(format_table(table, csv_style=True))
    return svg, table


def format_table(table, csv_style=False) -> str:
    if csv_style:
        lines = ["run,method,mta,tta"]
        lines += [f"{r['run']},{r['method']},{_fmt(r['mta'])},{_fmt(r['tta'])}" for r in table]
        return "\n".join(lines) + "\n"
    width = max(len(r["run"]) for r in table)
    lines = [f"{'run':<{width}}  method  {'MTA':>8}  {'TTA':>8}"]
    for r in table:
        lines.append(f"{r['run']:<{width}}  {r['method']:<6}  {_fmt(r['mta']):>8}  {_fmt(r['tta']):>8}")
    return "\n".join(lines) + "\n"


def partition_histograms(config: ExperimentConfig) -> np.ndarray:
    """(num_clients, num_classes) sample counts."""
    train, _ = load_datasets(config)
    part = partition(config, train)
    return np.stack([np.bincount(train.labels[part.assignments[k]], minlength=train.num_classes)
                     for k in range(config.num_clients)])


def poison_preview_svg(batch: atk.PoisonBatch, count=8) -> str:
    n = min(count, len(batch))
    squeeze = lambda img: img.reshape(img.shape[-2:]) if img.ndim >= 2 else img.reshape(1, -1)
    base = [squeeze(batch.images[i]) for i in range(n)]
    pois = [squeeze(batch.poisoned[i]) for i in range(n)]
    return image_grid([base, pois], labels=("base", "poisoned"))
