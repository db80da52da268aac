"""Command-line entry point: ``advmiss <command> [options]``.

Exit codes: 0 on success, 2 for configuration or input-format errors,
3 when every modeler cell failed, 1 for anything else.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment as ex
from .data import DataFormatError, apply_mechanism, load_masked, save_dataset, save_masked
from .graphs import as_adjacency
from .lamm import save_policy

logger = logging.getLogger("advmiss")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_ALL_FAILED = 0, 1, 2, 3


def _config(args, required=True):
    if args.config is None:
        if required:
            raise ex.ConfigError("--config is required for this command")
        return None
    return ex.load_config(args.config, args.profile, args.seed, args.out)


def _out_dir(args, cfg=None) -> Path:
    if args.out:
        return Path(args.out)
    if cfg is not None and cfg.out:
        return Path(cfg.out)
    return Path("results") / (cfg.name if cfg is not None else "advmiss")


def _save_matrix(path: Path, M, columns):
    lines = [",".join(columns)]
    lines += [",".join(repr(float(v)) for v in row) for row in np.asarray(M)]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _dump_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=ex._json_default) + "\n",
                    encoding="utf-8")


# --------------------------------------------------------------------------
# commands

def cmd_simulate(args) -> int:
    cfg = _config(args)
    ds, sigma_p, scm = ex._build_truth(cfg)
    out = _out_dir(args, cfg)
    save_dataset(ds, out / "data.csv")
    _save_matrix(out / "sigma_p.csv", sigma_p, ds.columns)
    if scm is not None:
        _dump_json(out / "truth.json", {"columns": list(scm.columns), "B": scm.B,
                                        "noise_vars": scm.noise_vars})
    print(f"wrote {ds.n} rows x {ds.d} columns to {out / 'data.csv'}")
    return EXIT_OK


def cmd_adversary(args) -> int:
    cfg = _config(args)
    setup = ex.build_setup(cfg)
    out = _out_dir(args, cfg)
    cols = setup.dataset.columns
    _save_matrix(out / "sigma_alpha.csv", setup.sigma_alpha, cols)
    _save_matrix(out / "sigma_p.csv", setup.sigma_p, cols)
    meta = {k: v for k, v in setup.meta.items() if k != "policy"}
    meta["mechanism"] = cfg.adversary["mechanism"]["kind"]
    _dump_json(out / "adversary.json", meta)
    if "policy" in setup.meta:
        save_policy(setup.meta["policy"], out / "policy.txt", cols)
    print(f"KL(p || alpha) = {setup.meta['kl_p_alpha']:.6g}; wrote {out}")
    return EXIT_OK


def cmd_mask(args) -> int:
    cfg = _config(args)
    setup = ex.build_setup(cfg)
    out = _out_dir(args, cfg)
    r = args.replicate
    for arm, mech, stream in (("mnar", setup.mechanism, 0), ("mcar", setup.mcar, 1)):
        mds = apply_mechanism(setup.dataset, mech, ex.substream(cfg.base_seed, 1, r, stream))
        save_masked(mds, out / f"masked_{arm}.csv")
        print(f"{arm}: missing rate {mds.missing_rate():.4f} -> {out / f'masked_{arm}.csv'}")
    return EXIT_OK


def _fit_spec(args, cfg):
    if cfg is not None:
        if not 0 <= args.modeler < len(cfg.modelers):
            raise ex.ConfigError(f"--modeler {args.modeler} out of range "
                                 f"(config has {len(cfg.modelers)})")
        spec = dict(cfg.modelers[args.modeler])
    else:
        spec = {"algorithm": args.algorithm}
    if args.init is not None:
        spec["inits"] = [args.init]
    return spec


def cmd_fit(args) -> int:
    cfg = _config(args, required=False)
    if args.masked is None:
        raise ex.ConfigError("--masked <csv> is required for fit")
    mds = load_masked(args.masked)
    spec = _fit_spec(args, cfg)
    sigma_p = None
    if cfg is not None and cfg.truth.get("kind") in ("preset", "matrix"):
        _, sigma_p, _ = ex._build_truth(cfg)
    cells = ex._cells(ex.ExperimentConfig("fit", {}, ("", ""), {}, [spec]))
    seed = ex.substream(args.seed or 0, 2)
    out = _out_dir(args, cfg)
    results, n_ok = [], 0
    for modeler, init, cell_spec in cells:
        if init == "True" and sigma_p is None:
            results.append({"modeler": modeler, "init": init, "status": "failed",
                            "error": "init 'True' needs a config with a synthetic truth"})
            continue
        setup = ex.Setup(None, sigma_p, None, None, None, None, None, None, [], {})
        try:
            g, sigma_hat, n_iter = ex._fit_cell(modeler, init, cell_spec, mds, setup, seed)
            if g is None:
                raise RuntimeError("thresholded graph is cyclic")
        except Exception as exc:  # noqa: BLE001 - reported per cell
            logger.warning("%s/%s failed: %s", modeler, init, exc)
            results.append({"modeler": modeler, "init": init, "status": "failed",
                            "error": f"{type(exc).__name__}: {exc}"})
            continue
        G = as_adjacency(g)
        tag = f"{modeler}_{init}".replace("/", "_").replace("+", "")
        _save_matrix(out / f"graph_{tag}.csv", G, mds.columns)
        edges = [[mds.columns[i], mds.columns[j]] for i, j in zip(*np.nonzero(G))]
        results.append({"modeler": modeler, "init": init, "status": "ok", "n_iter": n_iter,
                        "edges": edges})
        n_ok += 1
        print(f"{modeler}/{init}: {len(edges)} edges")
    _dump_json(out / "fit.json", results)
    return EXIT_OK if n_ok else EXIT_ALL_FAILED


def _print_summary(report):
    rows = ex.summary_table(report)
    head = f"{'modeler':<16}{'init':<12}{'HD mnar':>9}{'HD mcar':>9}{'succ mnar':>11}{'succ mcar':>11}"
    print(head)
    for row in rows:
        print(f"{row['modeler']:<16}{row['init']:<12}{row['hd_MNAR']:>9.2f}{row['hd_MCAR']:>9.2f}"
              f"{row['success_MNAR']:>11.2f}{row['success_MCAR']:>11.2f}")


def cmd_attack(args) -> int:
    cfg = _config(args)
    if args.jobs is not None:
        cfg.n_jobs = args.jobs
    report = ex.run_experiment(cfg)
    out = _out_dir(args, cfg)
    ex.emit_report(report, out)
    if report.records:
        _print_summary(report)
    print(f"wrote {out}")
    if report.records and all(r["status"] != "ok" for r in report.records):
        logger.error("every modeler cell failed")
        return EXIT_ALL_FAILED
    return EXIT_OK


def cmd_report(args) -> int:
    src = Path(args.records) if args.records else None
    if src is None:
        raise ex.ConfigError("--records <records.csv> is required for report")
    if src.is_dir():
        src = src / "records.csv"
    try:
        report = ex.load_records(src)
    except OSError as exc:
        raise ex.ConfigError(f"cannot read {src}: {exc}") from exc
    except (KeyError, ValueError) as exc:
        raise DataFormatError(f"{src}: not a records file ({exc})") from exc
    out = Path(args.out) if args.out else src.parent
    ex.emit_report(report, out, formats=("summary", "long"))
    _print_summary(report)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "adversary": cmd_adversary, "mask": cmd_mask,
            "fit": cmd_fit, "attack": cmd_attack, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="base seed, overrides the config")
    common.add_argument("--profile", choices=("fast", "full"), help="config profile")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="advmiss", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="sample the configured truth to CSV")
    sub.add_parser("adversary", parents=[common], help="build the adversarial law and mechanism")
    p = sub.add_parser("mask", parents=[common], help="write MNAR and matched-MCAR masked CSVs")
    p.add_argument("--replicate", type=int, default=0)
    p = sub.add_parser("fit", parents=[common], help="run one modeler on a masked CSV")
    p.add_argument("--masked", help="masked CSV (empty fields are missing)")
    p.add_argument("--modeler", type=int, default=0, help="index into the config's modelers")
    p.add_argument("--algorithm", default="missdag",
                   choices=("missdag", "mean_notears", "pc", "mean_pc"),
                   help="modeler when no config is given")
    p.add_argument("--init", help="restrict MissDAG to one initialization")
    p = sub.add_parser("attack", parents=[common], help="run the full experiment")
    p.add_argument("--jobs", type=int, help="parallel replicates (joblib)")
    p = sub.add_parser("report", parents=[common], help="summarize an existing records.csv")
    p.add_argument("--records", help="records.csv or the directory holding it")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ex.ConfigError, DataFormatError) as exc:
        print(f"advmiss: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"advmiss: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
