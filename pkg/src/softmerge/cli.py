"""Command-line entry point: ``softmerge {zoo,merge,oracle,eval,report}``.

Every command takes a plain-text config (one ``[experiment]`` section of
``key = value`` lines) and writes CSV outputs into ``--out``. Failures print a
single JSON line to stderr and exit with a code that names the failure class.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import io
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import datazoo as dz
from . import mergenet as mn
from . import netgraph as ng
from . import oracle as orc
from . import trainer as tr

log = logging.getLogger("softmerge")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_CAP = 4
EXIT_DIVERGED = 5
EXIT_FORMAT = 6

CSV_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # dataset
    dataset: str = "blobs"
    classes: int = 4
    dim: int = 8
    n_train: int = 1000
    n_val: int = 1000
    separation: float = 3.0
    noise: float = 0.1
    idx_images: str = ""
    idx_labels: str = ""
    idx_val_images: str = ""
    idx_val_labels: str = ""
    limit: Optional[int] = None
    # zoo
    hidden: str = "16"
    modules: int = 2
    members: str = "randomize, noise:1.0, base"
    base_epochs: int = 30
    base_lr: float = 0.05
    # merge
    level: str = "model"
    sites: str = "all"
    prime: int = 0
    lam: float = 5.0
    lr: float = 0.001
    epochs: int = 150
    batch_size: int = 32
    sigma_init: float = 0.01
    train_beta: bool = False
    reduction: str = "sum"
    model_loss: str = "combined"
    # run
    seed: int = 0
    oracle_cap: int = orc.DEFAULT_CAP
    plot: bool = False

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"unparsable config: {exc}".replace("\n", " ")) from None
        extra = [s for s in parser.sections() if s != "experiment"]
        if extra:
            raise ConfigError(f"unknown config sections {extra}; use a single [experiment] section")
        values = dict(parser["experiment"]) if parser.has_section("experiment") else {}
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values: dict) -> "ExperimentConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - set(fields))
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        kwargs = {}
        for key, raw in values.items():
            default = getattr(cls, key)
            try:
                if key == "limit":
                    kwargs[key] = None if str(raw).strip().lower() in ("", "none") else int(raw)
                elif isinstance(default, bool):
                    s = str(raw).strip().lower()
                    if s not in ("true", "false", "1", "0", "yes", "no"):
                        raise ValueError(raw)
                    kwargs[key] = s in ("true", "1", "yes")
                elif isinstance(default, int):
                    kwargs[key] = int(raw)
                elif isinstance(default, float):
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = str(raw).strip()
            except ValueError:
                raise ConfigError(f"bad value for {key}: {raw!r}") from None
        cfg = cls(**kwargs)
        cfg.check()
        return cfg

    def check(self) -> None:
        if self.dataset not in ("blobs", "moons", "idx"):
            raise ConfigError(f"dataset must be blobs, moons or idx, got {self.dataset!r}")
        if self.level not in mn.LEVELS:
            raise ConfigError(f"level must be one of {mn.LEVELS}, got {self.level!r}")
        if self.reduction not in ("mean", "sum"):
            raise ConfigError("reduction must be mean or sum")
        if self.model_loss not in ("combined", "per_model"):
            raise ConfigError("model_loss must be combined or per_model")
        if self.lr <= 0 or self.lam < 0 or self.sigma_init < 0:
            raise ConfigError("need lr > 0, lam >= 0, sigma_init >= 0")
        if self.epochs < 0 or self.batch_size < 1 or self.base_epochs < 0:
            raise ConfigError("need epochs >= 0, base_epochs >= 0, batch_size >= 1")
        if not self.member_list:
            raise ConfigError("members must list at least one model recipe")

    @property
    def member_list(self) -> list:
        return [m.strip() for m in self.members.split(",") if m.strip()]

    @property
    def hidden_sizes(self) -> list:
        try:
            return [int(h) for h in self.hidden.split(",") if h.strip()]
        except ValueError:
            raise ConfigError(f"hidden must be comma-separated integers, got {self.hidden!r}") from None

    @property
    def site_list(self) -> Optional[list]:
        if self.sites.strip().lower() == "all":
            return None
        try:
            return [int(s) for s in self.sites.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"sites must be 'all' or comma-separated integers, got {self.sites!r}") from None

    def train_config(self) -> tr.TrainConfig:
        return tr.TrainConfig(
            lr=self.lr,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lam=self.lam,
            seed=self.seed,
            level=self.level,
            sites=self.site_list,
            prime=self.prime,
            sigma_init=self.sigma_init,
            train_beta=self.train_beta,
            model_loss=self.model_loss,
            reduction=self.reduction,
        )


# shared plumbing ---------------------------------------------------------


def load_config(args) -> ExperimentConfig:
    text = ""
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        text = path.read_text()
    cfg = ExperimentConfig.from_text(text)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "limit", None) is not None:
        overrides["limit"] = args.limit
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg


def make_data(cfg: ExperimentConfig) -> tuple:
    if cfg.dataset == "idx":
        for key in ("idx_images", "idx_labels", "idx_val_images", "idx_val_labels"):
            if not getattr(cfg, key):
                raise ConfigError(f"dataset = idx needs {key}")
        train = dz.load_idx(cfg.idx_images, cfg.idx_labels, cfg.limit, "train")
        val = dz.load_idx(cfg.idx_val_images, cfg.idx_val_labels, cfg.limit, "val")
        return train, val
    n_train = cfg.n_train if cfg.limit is None else min(cfg.n_train, cfg.limit)
    n_val = cfg.n_val if cfg.limit is None else min(cfg.n_val, cfg.limit)
    n = n_train + n_val
    if cfg.dataset == "blobs":
        data = dz.gen_blobs(cfg.classes, cfg.dim, n, cfg.separation, cfg.seed)
    else:
        data = dz.gen_two_moons(n, cfg.noise, cfg.seed)
    return data.subset(slice(0, n_train), "train"), data.subset(slice(n_train, n), "val")


def make_template(cfg: ExperimentConfig, train: dz.Dataset) -> ng.ModelDef:
    layers = []
    if train.x.ndim > 2:
        layers.append(ng.LayerSpec("flatten", train.x.shape[1:]))
    n_in = int(np.prod(train.x.shape[1:]))
    body = ng.mlp([n_in, *cfg.hidden_sizes, train.n_classes])
    model = ng.ModelDef(layers + body.layers)
    try:
        groups = ng.split_groups(model, cfg.modules)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return ng.ModelDef(model.layers, groups)


def _write_csv(path: Path, header: list, rows: list) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _read_csv(path: Path) -> list:
    if not path.is_file():
        raise FileNotFoundError(f"missing file: {path}")
    return list(csv.DictReader(io.StringIO(path.read_text())))


def build_and_save_zoo(cfg: ExperimentConfig, out: Path, train, val) -> list:
    template = make_template(cfg, train)
    zoo = dz.build_zoo(template, train, cfg.member_list, cfg.seed, cfg.base_epochs, cfg.base_lr)
    (out / "models").mkdir(parents=True, exist_ok=True)
    rows = []
    for j, (model, recipe) in enumerate(zip(zoo, cfg.member_list)):
        rel = f"models/model_{j}.smrg"
        ng.save_model(model, out / rel)
        loss, acc = tr.evaluate(model, val)
        rows.append([j, rel, recipe, model.fingerprint, model.checksum(), repr(loss), repr(acc)])
    _write_csv(out / "manifest.csv", ["model", "file", "recipe", "fingerprint", "checksum", "val_loss", "val_acc"], rows)
    return zoo


def load_zoo(out: Path) -> list:
    rows = _read_csv(out / "manifest.csv")
    zoo = []
    for row in rows:
        model = ng.load_model(out / row["file"])
        if model.checksum() != row["checksum"]:
            raise ng.FormatError(f"{row['file']}: checksum does not match manifest")
        zoo.append(model)
    return zoo


def zoo_for(cfg: ExperimentConfig, out: Path, train, val) -> list:
    if (out / "manifest.csv").is_file():
        zoo = load_zoo(out)
        if len(zoo) != len(cfg.member_list):
            raise ConfigError(f"{out}/manifest.csv lists {len(zoo)} models, config has {len(cfg.member_list)} members")
        return zoo
    return build_and_save_zoo(cfg, out, train, val)


# commands ----------------------------------------------------------------


def cmd_zoo(args) -> int:
    cfg = load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, val = make_data(cfg)
    zoo = build_and_save_zoo(cfg, out, train, val)
    print(f"wrote {len(zoo)} models and manifest.csv to {out}")
    return EXIT_OK


def cmd_merge(args) -> int:
    cfg = load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, val = make_data(cfg)
    zoo = zoo_for(cfg, out, train, val)
    before = [m.checksum() for m in zoo]
    tcfg = cfg.train_config()
    try:
        bank, report = tr.train_gates(zoo, train, val, tcfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if [m.checksum() for m in zoo] != before:
        raise RuntimeError("base weights changed during gate training")
    spec = mn.MergeSpec.build(tcfg.level, zoo, tcfg.sites, tcfg.prime)
    merged = mn.MergedModel(zoo, spec, bank, model_loss=tcfg.model_loss, reduction=tcfg.reduction)
    final = mn.finalize(merged)
    ng.save_model(final, out / "merged.smrg")
    (out / "gates_init.csv").write_text(report.init_bank.to_csv())
    (out / "gates.csv").write_text(bank.to_csv())
    (out / "run.csv").write_text(report.to_csv())
    merged_loss, merged_acc = tr.evaluate(merged, val)
    final_loss, final_acc = tr.evaluate(final, val)
    win = mn.winners(bank)
    _write_csv(
        out / "summary.csv",
        ["key", "value"],
        [
            ["csv_version", CSV_VERSION],
            ["level", spec.level],
            ["sites", " ".join(map(str, spec.sites))],
            ["winners", " ".join(map(str, win))],
            ["merged_val_loss", repr(merged_loss)],
            ["merged_val_acc", repr(merged_acc)],
            ["finalized_val_loss", repr(final_loss)],
            ["finalized_val_acc", repr(final_acc)],
        ],
    )
    if cfg.plot:
        plot_run(out)
    print(f"winners={' '.join(map(str, win))} merged_val_acc={merged_acc!r} finalized_val_acc={final_acc!r}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    cfg = load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, val = make_data(cfg)
    zoo = zoo_for(cfg, out, train, val)
    try:
        spec = mn.MergeSpec.build(cfg.level, zoo, cfg.site_list, cfg.prime)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    rows = orc.score_assignments(zoo, spec, val, cfg.oracle_cap)
    best, loss = orc.brute_force_best(zoo, spec, val, cfg.oracle_cap)
    (out / "oracle.csv").write_text(orc.to_csv(rows))
    print(f"assignments={len(rows)} best={'-'.join(map(str, best))} val_loss={loss!r}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args)
    path = Path(args.model)
    if not path.is_file():
        raise FileNotFoundError(f"model file not found: {path}")
    model = ng.load_model(path)
    _, val = make_data(cfg)
    loss, acc = tr.evaluate(model, val)
    print(f"loss={loss!r} accuracy={acc!r}")
    print(json.dumps({"model": str(path), "loss": loss, "accuracy": acc}))
    return EXIT_OK


def build_report(run: Path) -> list:
    manifest = _read_csv(run / "manifest.csv")
    summary = {r["key"]: r["value"] for r in _read_csv(run / "summary.csv")}
    init = mn.GateBank.from_csv((run / "gates_init.csv").read_text()) if (run / "gates_init.csv").is_file() else None
    final_path = run / "gates.csv"
    if not final_path.is_file():
        raise FileNotFoundError(f"missing file: {final_path}")
    final = mn.GateBank.from_csv(final_path.read_text())
    rows = []
    for row in manifest:
        j = int(row["model"])
        for t, site in enumerate(final.sites):
            rows.append(
                [
                    "model",
                    j,
                    site,
                    row["recipe"],
                    row["val_acc"],
                    repr(float(init.log_alpha[t, j])) if init is not None else "",
                    repr(float(final.log_alpha[t, j])),
                    repr(float(final.deterministic()[t, j])),
                ]
            )
    rows.append(["merged", "", "", "", summary["merged_val_acc"], "", "", ""])
    rows.append(["finalized", "", "", summary["winners"], summary["finalized_val_acc"], "", "", ""])
    return rows


REPORT_HEADER = ["kind", "model", "site", "recipe", "val_acc", "init_log_alpha", "final_log_alpha", "det_gate"]


def cmd_report(args) -> int:
    run = Path(args.run)
    if not run.is_dir():
        raise FileNotFoundError(f"run directory not found: {run}")
    rows = build_report(run)
    _write_csv(run / "report.csv", REPORT_HEADER, rows)
    widths = [max(len(str(r[i])) for r in [REPORT_HEADER, *rows]) for i in range(len(REPORT_HEADER))]
    for r in [REPORT_HEADER, *rows]:
        print("  ".join(str(v).ljust(w) for v, w in zip(r, widths)).rstrip())
    return EXIT_OK


def plot_run(run: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = _read_csv(run / "run.csv")
    epochs = [int(r["epoch"]) for r in rows]
    gate_cols = [c for c in rows[0] if c.startswith("log_alpha_")] if rows else []
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.plot(epochs, [float(r["val_acc"]) for r in rows], label="val acc")
    ax1.plot(epochs, [float(r["train_loss"]) for r in rows], label="train loss")
    ax1.set_xlabel("epoch")
    ax1.legend()
    for c in gate_cols:
        ax2.plot(epochs, [float(r[c]) for r in rows], label=c[len("log_alpha_"):])
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("log alpha")
    ax2.legend(fontsize="small")
    fig.tight_layout()
    path = run / "run.png"
    fig.savefig(path)
    plt.close(fig)
    return path


# entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="softmerge", description="Soft merging of same-architecture networks.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", metavar="PATH", help="experiment config ([experiment] key = value)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--limit", type=int, help="cap the number of samples per split")
        if out:
            p.add_argument("--out", metavar="DIR", required=True, help="output directory")

    common(sub.add_parser("zoo", help="train/corrupt the base models and write SMRG files + manifest"))
    common(sub.add_parser("merge", help="learn gates, write gates/run/summary CSVs and merged.smrg"))
    common(sub.add_parser("oracle", help="enumerate one-hot assignments and write oracle.csv"))
    p = sub.add_parser("eval", help="evaluate an SMRG model on the config's validation split")
    common(p, out=False)
    p.add_argument("--model", metavar="PATH", required=True)
    p = sub.add_parser("report", help="summarize a merge run directory into report.csv")
    p.add_argument("run", metavar="DIR")
    return parser


COMMANDS = {"zoo": cmd_zoo, "merge": cmd_merge, "oracle": cmd_oracle, "eval": cmd_eval, "report": cmd_report}


def _fail(kind: str, code: int, exc: BaseException) -> int:
    msg = str(exc).replace("\n", " ")
    print(json.dumps({"error": kind, "code": code, "message": msg}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        return _fail("config", EXIT_CONFIG, exc)
    except FileNotFoundError as exc:
        return _fail("missing_file", EXIT_MISSING, exc)
    except orc.CapExceeded as exc:
        return _fail("cap_exceeded", EXIT_CAP, exc)
    except dz.DivergenceError as exc:
        return _fail("diverged", EXIT_DIVERGED, exc)
    except (ng.FormatError, dz.IDXError) as exc:
        return _fail("bad_format", EXIT_FORMAT, exc)
    except ng.ArchitectureMismatch as exc:
        return _fail("config", EXIT_CONFIG, exc)
    except Exception as exc:  # noqa: BLE001
        log.debug("unexpected failure", exc_info=True)
        return _fail("internal", EXIT_INTERNAL, exc)


if __name__ == "__main__":
    sys.exit(main())
