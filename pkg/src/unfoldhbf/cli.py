"""Command line pipeline: generate-data, train, evaluate, complexity-report.

Configuration is a flat ``key = value`` file; ``--set key=value`` and ``--seed`` override it.
Every output is a function of the configuration, the seed and the input files only.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .baselines import complexity_estimate, dbf_se, layer_cost, omp_hbf
from .channel import SystemDims, dataset_read, dataset_write, generate_dataset, optimal_digital_precoder
from .mannet import TrainConfig, fc_hbf_design, model_read, model_write, train
from .subnet import default_candidates, fixed_sc_hbf, heuristic_sc_hbf, sc_hbf_design, submannet_train

logger = logging.getLogger("unfoldhbf")

TRAIN_STREAM, TEST_STREAM = 0, 1
ALL_SCHEMES = ("dbf", "mannet-fc", "omp", "submannet-sc", "heuristic-sc", "fixed-sc")
LAYER_SCHEDULE = {16: 4, 32: 5, 64: 6, 128: 7}
COMPLEXITY_NT = (16, 32, 64, 128)
RESULT_COLUMNS = ("scheme", "n_tx", "n_rf", "n_streams", "k_subcarriers", "snr_db", "se_mean",
                  "se_std", "n_channels", "op_count", "wall_time_s")
LOSS_COLUMNS = ("epoch", "batch", "inner_iter", "loss")
SCHEMA_VERSION = 1


@dataclass
class RunConfig:
    n_tx: int = 16
    n_rx: int = 2
    n_rf: int = 2
    n_streams: int = 2
    n_subcarriers: int = 16
    n_paths: int = 4
    center_freq: float = 300e9
    bandwidth: float = 30e9
    n_train: int = 200
    n_test: int = 100
    snr_db: tuple = (10.0,)
    schemes: tuple = ALL_SCHEMES
    n_layers: int = 0          # 0 selects the per-N_t schedule
    epochs: int = 30
    batch_size: int = 8
    inner_iters: int = 3
    learning_rate: float = 1e-4
    t: float = 0.1
    init_std: float = 0.1
    train_snr_db: float = 10.0
    n_iters: int = 10
    mapping_method: str = "optimal"
    timing: bool = True
    seed: int = 0
    out: str = "run"
    extra: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.schemes:
            raise ValueError("scheme list is empty")
        unknown = set(self.schemes) - set(ALL_SCHEMES)
        if unknown:
            raise ValueError(f"unknown schemes {sorted(unknown)}; choose from {ALL_SCHEMES}")
        if not all(np.isfinite(self.snr_db)):
            raise ValueError("SNR values must be finite")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be positive")
        self.dims  # validates the system dimensions early

    @property
    def dims(self) -> SystemDims:
        return SystemDims(n_tx=self.n_tx, n_rx=self.n_rx, n_rf=self.n_rf, n_streams=self.n_streams,
                          n_subcarriers=self.n_subcarriers, center_freq=self.center_freq,
                          bandwidth=self.bandwidth, n_paths=self.n_paths)

    @property
    def layers(self) -> int:
        return self.n_layers or LAYER_SCHEDULE.get(self.n_tx, 4)

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(n_layers=self.layers, epochs=self.epochs, batch_size=self.batch_size,
                           inner_iters=self.inner_iters, learning_rate=self.learning_rate, t=self.t,
                           init_std=self.init_std, train_snr_db=self.train_snr_db, seed=self.seed)

    @property
    def out_dir(self) -> Path:
        return Path(self.out)


def _convert(name: str, raw: str):
    kinds = {f.name: f for f in fields(RunConfig)}
    if name not in kinds or name == "extra":
        raise ValueError(f"unknown config key {name!r}")
    default = kinds[name].default
    if name == "snr_db":
        return tuple(float(v) for v in raw.split(",") if v.strip())
    if name == "schemes":
        return tuple(v.strip() for v in raw.split(",") if v.strip())
    if isinstance(default, bool):
        if raw.lower() not in ("1", "0", "true", "false", "yes", "no"):
            raise ValueError(f"{name}: expected a boolean, got {raw!r}")
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_pairs(lines, source: str = "<config>") -> dict:
    values = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{n}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        values[key] = _convert(key, raw)
    return values


def load_config(path=None, overrides=(), seed=None, out=None) -> RunConfig:
    values = {}
    if path is not None:
        values.update(parse_pairs(Path(path).read_text().splitlines(), str(path)))
    values.update(parse_pairs(overrides, "--set"))
    if seed is not None:
        values["seed"] = seed
    if out is not None:
        values["out"] = out
    return RunConfig(**values)


# -- commands -------------------------------------------------------------------


def cmd_generate_data(cfg: RunConfig) -> tuple[Path, Path]:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    dims = cfg.dims
    paths = cfg.out_dir / "train.hbfc", cfg.out_dir / "test.hbfc"
    for path, count, stream in zip(paths, (cfg.n_train, cfg.n_test), (TRAIN_STREAM, TEST_STREAM)):
        dataset_write(path, generate_dataset(dims, count, cfg.seed, stream), dims.center_freq, dims.bandwidth)
        logger.info("wrote %d realizations to %s", count, path)
    return paths


def _write_csv(path: Path, kind: str, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# unfoldhbf {kind} v{SCHEMA_VERSION}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def batch_loss_rows(history) -> list[tuple]:
    """One row per (epoch, batch): mean loss over that batch's inner iterations."""
    groups: dict[tuple[int, int], list[float]] = {}
    for r in history:
        groups.setdefault((r.epoch, r.batch), []).append(r.loss)
    return [(e, b, len(v), repr(float(np.mean(v)))) for (e, b), v in groups.items()]


def epoch_loss_rows(history) -> list[tuple]:
    groups: dict[int, list[float]] = {}
    for r in history:
        groups.setdefault(r.epoch, []).append(r.loss)
    return [(e, repr(float(np.mean(v)))) for e, v in groups.items()]


def _needs(cfg: RunConfig) -> tuple[bool, bool]:
    fc = any(s in cfg.schemes for s in ("mannet-fc", "heuristic-sc", "fixed-sc"))
    return fc, "submannet-sc" in cfg.schemes


def cmd_train(cfg: RunConfig) -> list[Path]:
    data = dataset_read(cfg.out_dir / "train.hbfc")
    if data and data[0].n_tx != cfg.n_tx:
        raise ValueError(f"training data has N_t={data[0].n_tx}, config says {cfg.n_tx}")
    need_fc, need_sub = _needs(cfg)
    written = []
    jobs = []
    if need_fc:
        jobs.append(("mannet", lambda: train(data, cfg.n_rf, cfg.n_streams, cfg.train_config)))
    if need_sub:
        jobs.append(("submannet", lambda: submannet_train(data, cfg.n_rf, cfg.n_streams, cfg.train_config,
                                                          cfg.mapping_method)))
    for name, job in jobs:
        net, history = job()
        model_write(cfg.out_dir / f"{name}.mnet", net)
        _write_csv(cfg.out_dir / f"loss_{name}.csv", "loss", LOSS_COLUMNS, batch_loss_rows(history))
        _write_csv(cfg.out_dir / f"loss_{name}_epoch.csv", "epoch-loss", ("epoch", "loss"),
                   epoch_loss_rows(history))
        written += [cfg.out_dir / f"{name}.mnet", cfg.out_dir / f"loss_{name}.csv",
                    cfg.out_dir / f"loss_{name}_epoch.csv"]
        logger.info("trained %s: final epoch loss %s", name, epoch_loss_rows(history)[-1][1])
    return written


def op_count(cfg: RunConfig, scheme: str) -> float:
    if scheme == "dbf":
        return float("nan")
    kw = dict(n_layers=cfg.layers, n_iters=cfg.n_iters, n_rx=cfg.n_rx, n_paths=cfg.n_paths)
    if scheme == "heuristic-sc":
        kw["n_candidates"] = len(default_candidates(cfg.n_subcarriers))
    return complexity_estimate(scheme, cfg.n_tx, cfg.n_rf, cfg.n_streams, cfg.n_subcarriers, **kw)


def _designers(cfg: RunConfig):
    need_fc, need_sub = _needs(cfg)
    net = model_read(cfg.out_dir / "mannet.mnet", cfg.n_tx, cfg.n_rf) if need_fc else None
    snet = model_read(cfg.out_dir / "submannet.mnet", cfg.n_tx, cfg.n_rf) if need_sub else None
    I, m = cfg.n_iters, cfg.mapping_method
    return {
        "dbf": lambda ch, fo, snr, rng: dbf_se(ch, fo, snr),
        "mannet-fc": lambda ch, fo, snr, rng: fc_hbf_design(net, ch, fo, snr, I, rng).se,
        "omp": lambda ch, fo, snr, rng: omp_hbf(ch, fo, snr, cfg.n_rf).se,
        "submannet-sc": lambda ch, fo, snr, rng: sc_hbf_design(snet, ch, fo, snr, I, rng, m).se,
        "heuristic-sc": lambda ch, fo, snr, rng: heuristic_sc_hbf(net, ch, fo, snr, I, None, rng, m).se,
        "fixed-sc": lambda ch, fo, snr, rng: fixed_sc_hbf(net, ch, fo, snr, I, rng).se,
    }


def evaluate(cfg: RunConfig) -> list[dict]:
    test = dataset_read(cfg.out_dir / "test.hbfc")
    if not test:
        raise ValueError("test set is empty")
    designers = _designers(cfg)
    rows = []
    for snr_db in cfg.snr_db:
        snr = 10 ** (snr_db / 10)    # sigma_n^2 = 1
        f_opts = [optimal_digital_precoder(ch, snr, cfg.n_streams).f_opt for ch in test]
        for scheme in cfg.schemes:
            design = designers[scheme]
            se, elapsed = [], 0.0
            for i, (ch, fo) in enumerate(zip(test, f_opts)):
                rng = np.random.default_rng([cfg.seed, i])
                start = time.perf_counter()
                se.append(design(ch, fo, snr, rng))
                elapsed += time.perf_counter() - start
            rows.append(dict(scheme=scheme, n_tx=cfg.n_tx, n_rf=cfg.n_rf, n_streams=cfg.n_streams,
                             k_subcarriers=cfg.n_subcarriers, snr_db=snr_db, se_mean=float(np.mean(se)),
                             se_std=float(np.std(se)), n_channels=len(se), op_count=op_count(cfg, scheme),
                             wall_time_s=elapsed / len(se) if cfg.timing else 0.0))
    return rows


def cmd_evaluate(cfg: RunConfig) -> Path:
    rows = evaluate(cfg)
    path = cfg.out_dir / "results.csv"
    fmt = {"se_mean": repr, "se_std": repr, "op_count": repr, "wall_time_s": lambda v: f"{v:.6f}"}
    _write_csv(path, "results", RESULT_COLUMNS,
               [[fmt.get(c, str)(r[c]) for c in RESULT_COLUMNS] for r in rows])
    for snr_db in cfg.snr_db:
        by = {r["scheme"]: r["se_mean"] for r in rows if r["snr_db"] == snr_db}
        if "dbf" in by and "mannet-fc" in by:
            logger.info("SNR %g dB: ManNet-FC / DBF = %.4f", snr_db, by["mannet-fc"] / by["dbf"])
    return path


def complexity_rows(cfg: RunConfig) -> list[list]:
    schemes = ("mannet-fc", "heuristic-sc", "submannet-sc", "fixed-sc", "omp")
    rows = []
    for n_tx in COMPLEXITY_NT:
        L = LAYER_SCHEDULE[n_tx]
        kw = dict(n_layers=L, n_iters=cfg.n_iters, n_rx=cfg.n_rx, n_paths=cfg.n_paths)
        counts = []
        for s in schemes:
            extra = {"n_candidates": len(default_candidates(cfg.n_subcarriers))} if s == "heuristic-sc" else {}
            counts.append(complexity_estimate(s, n_tx, cfg.n_rf, cfg.n_streams, cfg.n_subcarriers, **kw, **extra))
        rows.append([n_tx, L, *[repr(c) for c in counts],
                     repr(layer_cost("mannet-fc", n_tx, cfg.n_rf, cfg.n_streams, cfg.n_subcarriers)),
                     repr(layer_cost("submannet-sc", n_tx, cfg.n_rf, cfg.n_streams, cfg.n_subcarriers))])
    return rows


COMPLEXITY_COLUMNS = ("n_tx", "n_layers", "mannet_fc", "heuristic_sc", "submannet_sc", "fixed_sc", "omp",
                      "mannet_layer_cost", "submannet_layer_cost")


def cmd_complexity_report(cfg: RunConfig) -> Path:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.out_dir / "complexity.csv"
    _write_csv(path, "complexity", COMPLEXITY_COLUMNS, complexity_rows(cfg))
    return path


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "complexity-report": cmd_complexity_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unfoldhbf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="key=value configuration file")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.set, args.seed, args.out)
        result = COMMANDS[args.command](cfg)
    except (ValueError, OSError) as exc:
        logger.error("%s", exc)
        return 2
    if isinstance(result, (list, tuple)):
        for p in result:
            print(p)
    else:
        print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
