"""Config-driven attack experiments: data, adversary, masks, modelers, metrics.

A run draws the data once, builds the adversarial law and mechanism once,
and then for every replicate draws an MNAR mask and a matched-MCAR mask and
fits every configured modeler cell on each.  Randomness is keyed by
``SeedSequence([base_seed, ...])`` so adding modelers never changes masks.
"""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import adversary as adv
from .data import Dataset, apply_mechanism, load_dataset, load_sachs, mean_impute
from .graphs import as_adjacency, attack_success, hamming_distance
from .lamm import LammConfig, LammMechanism, lamm_train
from .modeler import INIT_SCHEMES, mean_impute_notears, missdag, notears_fit, pc_fisherz
from .scm import Dag, GaussianScm, covariance_of, gaussian_kl, sample, scm_one, scm_two

logger = logging.getLogger(__name__)

PRESETS = {"scm_one": scm_one, "scm_two": scm_two}
RECORD_FIELDS = ("experiment", "replicate", "arm", "mechanism", "modeler", "init", "status",
                 "hd", "success", "kl_hat_alpha", "kl_hat_p", "missing_rate",
                 "masked_col_rate", "n_iter", "reversed", "edges", "error")
METRICS = ("hd", "success", "kl_hat_alpha", "kl_hat_p", "missing_rate", "masked_col_rate")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


# --------------------------------------------------------------------------
# config

@dataclass
class ExperimentConfig:
    """Parsed experiment settings; see ``configs/*.json`` for the schema."""

    name: str
    truth: dict
    target_edge: tuple
    adversary: dict
    modelers: list
    replicates: int = 10
    base_seed: int = 0
    n_samples: int | None = None
    reference: dict = field(default_factory=lambda: {"kind": "scm"})
    mcar: dict = field(default_factory=lambda: {"n_mc": 100_000})
    out: str | None = None
    n_jobs: int = 1


def _set_path(doc, dotted, value):
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value


def parse_config(doc: dict, profile: str | None = None, seed: int | None = None,
                 out: str | None = None) -> ExperimentConfig:
    """Validate a config document and apply a profile's dotted overrides."""
    doc = copy.deepcopy(doc)
    profiles = doc.pop("profiles", {})
    if profile is not None:
        if profile not in profiles:
            raise ConfigError(f"unknown profile {profile!r}; have {sorted(profiles)}")
        for key, value in profiles[profile].items():
            _set_path(doc, key, value)
    if seed is not None:
        doc["base_seed"] = seed
    if out is not None:
        doc["out"] = out
    for key in ("name", "truth", "target_edge", "adversary", "modelers"):
        if key not in doc:
            raise ConfigError(f"missing required key {key!r}")
    te = doc["target_edge"]
    if not (isinstance(te, (list, tuple)) and len(te) == 2):
        raise ConfigError("target_edge must be a [parent, child] pair")
    if int(doc.get("replicates", 10)) < 0:
        raise ConfigError("replicates must be >= 0")
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(doc) - known - {"description"}
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    doc.pop("description", None)
    doc["target_edge"] = tuple(te)
    return ExperimentConfig(**doc)


def load_config(path, profile=None, seed=None, out=None) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot load config {path}: {exc}") from exc
    return parse_config(doc, profile, seed, out)


def resolve_names(items, columns, what) -> list[int]:
    """Column names to 0-based indices; integers are read as 1-based."""
    out = []
    for it in items:
        if isinstance(it, bool):
            raise ConfigError(f"{what}: boolean is not a column reference")
        if isinstance(it, int):
            if not 1 <= it <= len(columns):
                raise ConfigError(f"{what}: 1-based index {it} out of range")
            logger.info("%s: 1-based index %d -> column %r (0-based %d)",
                        what, it, columns[it - 1], it - 1)
            out.append(it - 1)
        else:
            if it not in columns:
                raise ConfigError(f"{what}: unknown column {it!r}")
            out.append(list(columns).index(it))
    return out


def substream(base_seed: int, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(base_seed), *[int(k) for k in keys]])


def _label_key(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


# --------------------------------------------------------------------------
# setup: truth, reference graph, adversary

@dataclass
class Setup:
    """Everything fixed across replicates."""

    dataset: Dataset
    sigma_p: np.ndarray
    scm_p: GaussianScm | None
    reference: Dag
    target: tuple
    sigma_alpha: np.ndarray
    mechanism: adv.MissingnessMechanism
    mcar: adv.McarMechanism
    V: list
    meta: dict


def _build_truth(cfg: ExperimentConfig):
    t = cfg.truth
    kind = t.get("kind")
    if kind in ("preset", "matrix"):
        if kind == "preset":
            if t.get("name") not in PRESETS:
                raise ConfigError(f"unknown preset {t.get('name')!r}")
            scm = PRESETS[t["name"]]()
        else:
            try:
                scm = GaussianScm(np.array(t["B"], float), np.array(t["noise_vars"], float),
                                  tuple(t.get("columns") or
                                        (f"X{j + 1}" for j in range(len(t["B"])))))
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"bad SCM matrix: {exc}") from exc
        if cfg.n_samples is None or cfg.n_samples < 1:
            raise ConfigError("synthetic truth needs n_samples >= 1")
        X = sample(scm, cfg.n_samples, substream(cfg.base_seed, 0, 0))
        return Dataset(scm.columns, X), covariance_of(scm), scm
    if kind == "dataset":
        path = t.get("path", "sachs")
        if path == "sachs":
            ds = load_sachs(center=t.get("center", True), column_map=t.get("column_map"))
        else:
            ds = load_dataset(path, center=t.get("center", True), column_map=t.get("column_map"))
        X = ds.values
        return ds, np.cov(X.T, bias=True), None
    raise ConfigError(f"unknown truth kind {kind!r}")


def _reference_graph(cfg, ds, scm):
    ref = cfg.reference
    if ref.get("kind", "scm") == "scm":
        if scm is None:
            raise ConfigError("reference kind 'scm' needs a synthetic truth")
        return scm.dag()
    if ref["kind"] == "notears":
        fit = notears_fit(ds.values, ref.get("l1", 0.1), ref.get("w_threshold", 0.3),
                          columns=ds.columns, notears_opts=ref.get("notears_opts"))
        if fit.graph is None:
            raise ConfigError("reference NOTEARS graph is cyclic")
        return fit.graph
    raise ConfigError(f"unknown reference kind {ref['kind']!r}")


def _adversarial_law(spec, setup_parts):
    ds, sigma_p, scm, ref, (p, c) = setup_parts
    kind = spec.get("kind", "optimal")
    if kind == "optimal":
        return covariance_of(adv.optimal_adversarial_scm(sigma_p, ref.without_edge(p, c)))
    if kind == "delete_edge":
        if scm is None:
            raise ConfigError("delete_edge needs a synthetic truth")
        a = adv.delete_edge(scm, p, c, spec.get("weight", 0.0), spec.get("child_noise"))
        return covariance_of(a)
    if kind == "covariance_zeroing":
        pairs = [tuple(resolve_names(pr, ds.columns, "zeroed pair")) for pr in spec["pairs"]]
        return adv.zero_covariance(sigma_p, pairs)
    raise ConfigError(f"unknown adversarial law {kind!r}")


def _mechanism(spec, ds, sigma_p, sigma_alpha, V, seed, meta):
    kind = spec.get("kind")
    X = ds.values
    lam_mode = spec.get("lambda_mode", "auto")
    if kind in ("localized_rs", "all_or_none_rs"):
        mech = adv.LocalizedRejectionSampler(sigma_p, sigma_alpha, V, lam_mode,
                                             spec.get("lambda_max"),
                                             all_or_none=kind == "all_or_none_rs").fit(X)
        meta["lambda"] = mech.lambda_
        meta["clip_count_train"] = mech.clip_count(X)
        return mech
    if kind == "generalized_rs":
        mech = adv.GeneralizedRejectionSampler(sigma_p, sigma_alpha, spec.get("pi"),
                                               lam_mode).fit(X)
        meta["lambda_star"] = mech.lambda_star_.tolist()
        return mech
    if kind == "mcar":
        support = adv.patterns_for_subset(V, ds.d)
        return adv.McarMechanism(support, np.asarray(spec["probs"], float))
    if kind == "lamm":
        cfg = LammConfig(sigma_alpha, V, spec.get("lam", 1e-2), spec.get("K", 5),
                         spec.get("epochs", 300), spec.get("lr", 1e-2),
                         spec.get("wem_eps", 1e-5), tuple(spec.get("hidden", (100, 100))),
                         spec.get("patience"), spec.get("min_delta", 1e-4))
        policy, trace = lamm_train(cfg, X, seed)
        meta["lamm_loss_trace"] = trace
        meta["policy"] = policy
        return LammMechanism(policy)
    raise ConfigError(f"unknown mechanism kind {kind!r}")


def build_setup(cfg: ExperimentConfig) -> Setup:
    ds, sigma_p, scm = _build_truth(cfg)
    p, c = resolve_names(cfg.target_edge, ds.columns, "target_edge")
    ref = _reference_graph(cfg, ds, scm)
    if (p, c) not in ref.edges:
        raise ConfigError(f"target edge {cfg.target_edge} is not in the reference graph")
    law = cfg.adversary.get("theta_alpha", {"kind": "optimal"})
    sigma_alpha = _adversarial_law(law, (ds, sigma_p, scm, ref, (p, c)))
    mspec = cfg.adversary.get("mechanism")
    if not mspec:
        raise ConfigError("adversary.mechanism is required")
    V = resolve_names(mspec.get("V", []), ds.columns, "V") if mspec.get("V") else [p, c]
    if mspec.get("kind") in ("localized_rs", "all_or_none_rs", "lamm"):
        needed = {c, *ref.parents(c)}
        if not needed <= set(V):
            logger.warning("V=%s does not contain the target child and its reference parents %s",
                           V, sorted(needed))
    meta = {"target": (p, c), "V": V, "reference_edges": list(ref.edges)}
    mech = _mechanism(mspec, ds, sigma_p, sigma_alpha, V, substream(cfg.base_seed, 0, 1), meta)
    mc = cfg.mcar or {}
    if scm is not None and mc.get("source", "scm") == "scm":
        mcar = adv.mcar_from_mnar(mech, scm, mc.get("n_mc", 100_000),
                                  substream(cfg.base_seed, 0, 2), method=mc.get("method", "auto"))
    else:
        mcar = adv.mcar_from_mnar(mech, X=ds.values, method="monte_carlo")
    meta["mcar_probs"] = mcar.probs.tolist()
    meta["kl_p_alpha"] = gaussian_kl(sigma_p, sigma_alpha)
    return Setup(ds, sigma_p, scm, ref, (p, c), sigma_alpha, mech, mcar, V, meta)


# --------------------------------------------------------------------------
# running

@dataclass
class AttackReport:
    name: str
    records: list
    meta: dict = field(default_factory=dict)

    def aggregate(self) -> list[dict]:
        """Per (modeler, init, arm) means over successful cells."""
        groups: dict = {}
        for rec in self.records:
            groups.setdefault((rec["modeler"], rec["init"], rec["arm"]), []).append(rec)
        out = []
        for (modeler, init, arm), recs in groups.items():
            ok = [r for r in recs if r["status"] == "ok"]
            row = {"modeler": modeler, "init": init, "arm": arm,
                   "n_ok": len(ok), "n_failed": len(recs) - len(ok)}
            for m in METRICS:
                vals = [r[m] for r in ok if r[m] is not None and not _isnan(r[m])]
                row[m] = float(np.mean(vals)) if vals else float("nan")
            out.append(row)
        return out


def _isnan(v):
    return isinstance(v, float) and math.isnan(v)


def _cells(cfg: ExperimentConfig):
    cells = []
    for spec in cfg.modelers:
        alg = spec.get("algorithm")
        if alg == "missdag":
            for init in spec.get("inits", list(INIT_SCHEMES)):
                if init not in INIT_SCHEMES:
                    raise ConfigError(f"unknown init {init!r}")
                cells.append(("MissDAG", init, spec))
        elif alg == "mean_notears":
            cells.append(("Mean+NT", "-", spec))
        elif alg == "pc":
            cells.append(("PC-" + spec.get("deletion", "testwise"), "-", spec))
        elif alg == "mean_pc":
            cells.append(("Mean+PC", "-", spec))
        else:
            raise ConfigError(f"unknown modeler {alg!r}")
    return cells


def _fit_cell(modeler, init, spec, mds, setup: Setup, seed):
    if modeler == "MissDAG":
        fit = missdag(mds, init, spec.get("eps", 1e-5), spec.get("var_mode", "equal"),
                      spec.get("l1", 0.1), spec.get("w_threshold", 0.3),
                      sigma_true=setup.sigma_p, seed=seed,
                      max_em_iter=spec.get("max_em_iter", 100),
                      notears_opts=spec.get("notears_opts"))
        return fit.graph, fit.sigma_hat, fit.n_iter
    if modeler == "Mean+NT":
        fit = mean_impute_notears(mds, spec.get("l1", 0.1), spec.get("w_threshold", 0.3),
                                  spec.get("var_mode", "equal"), spec.get("notears_opts"))
        return fit.graph, fit.sigma_hat, 1
    if modeler.startswith("PC-"):
        G = pc_fisherz(mds, spec.get("alpha", 0.01), spec.get("deletion", "testwise"))
        return G, None, 1
    if modeler == "Mean+PC":
        G = pc_fisherz(mean_impute(mds), spec.get("alpha", 0.01), "complete")
        return G, None, 1
    raise ConfigError(modeler)


def run_replicate(cfg: ExperimentConfig, setup: Setup, r: int) -> list[dict]:
    records = []
    arms = (("MNAR", cfg.adversary["mechanism"]["kind"], setup.mechanism, 0),
            ("MCAR", "mcar", setup.mcar, 1))
    V = setup.V
    for arm, mech_name, mech, stream in arms:
        mds = apply_mechanism(setup.dataset, mech, substream(cfg.base_seed, 1, r, stream))
        rate = mds.missing_rate()
        col_rate = float(mds.column_missing_rates()[V].mean())
        for modeler, init, spec in _cells(cfg):
            label = f"{modeler}/{init}"
            seed = substream(cfg.base_seed, 1, r, 2 + _label_key(label) % (2**31))
            rec = dict.fromkeys(RECORD_FIELDS)
            rec.update(experiment=cfg.name, replicate=r, arm=arm, mechanism=mech_name,
                       modeler=modeler, init=init, missing_rate=rate, masked_col_rate=col_rate,
                       error="")
            try:
                g, sigma_hat, n_iter = _fit_cell(modeler, init, spec, mds, setup, seed)
                if g is None:
                    raise RuntimeError("thresholded graph is cyclic")
                G = as_adjacency(g)
                p, c = setup.target
                rec.update(status="ok", n_iter=n_iter,
                           hd=hamming_distance(setup.reference, G),
                           success=attack_success(G, setup.target),
                           reversed=int(G[c, p] == 1 and G[p, c] == 0),
                           edges=";".join(f"{i}>{j}" for i, j in zip(*np.nonzero(G))))
                if sigma_hat is not None:
                    rec["kl_hat_alpha"] = gaussian_kl(sigma_hat, setup.sigma_alpha)
                    rec["kl_hat_p"] = gaussian_kl(sigma_hat, setup.sigma_p)
                else:
                    rec["kl_hat_alpha"] = rec["kl_hat_p"] = float("nan")
            except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the run
                logger.warning("cell %s rep %d %s failed: %s", label, r, arm, exc)
                rec.update(status="failed", error=f"{type(exc).__name__}: {exc}",
                           kl_hat_alpha=float("nan"), kl_hat_p=float("nan"))
            records.append(rec)
    return records


def run_experiment(cfg: ExperimentConfig, setup: Setup | None = None) -> AttackReport:
    """Run every replicate; failures are recorded per cell."""
    if cfg.replicates == 0:
        return AttackReport(cfg.name, [], {"replicates": 0})
    setup = setup or build_setup(cfg)
    if cfg.n_jobs != 1:
        from joblib import Parallel, delayed
        chunks = Parallel(n_jobs=cfg.n_jobs)(
            delayed(run_replicate)(cfg, setup, r) for r in range(cfg.replicates))
    else:
        chunks = [run_replicate(cfg, setup, r) for r in range(cfg.replicates)]
    records = [rec for chunk in chunks for rec in chunk]
    meta = {k: v for k, v in setup.meta.items() if k != "policy"}
    meta["replicates"] = cfg.replicates
    meta["columns"] = list(setup.dataset.columns)
    return AttackReport(cfg.name, records, meta)


# --------------------------------------------------------------------------
# output

def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def _csv_text(rows, fields):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for row in rows:
        w.writerow([_cell(row.get(f)) for f in fields])
    return buf.getvalue()


def summary_table(report: AttackReport) -> list[dict]:
    """One row per (modeler, init) with MNAR and MCAR columns side by side."""
    agg = {(a["modeler"], a["init"], a["arm"]): a for a in report.aggregate()}
    order = []
    for rec in report.records:
        key = (rec["modeler"], rec["init"])
        if key not in order:
            order.append(key)
    rows = []
    for modeler, init in order:
        row = {"modeler": modeler, "init": init}
        for arm in ("MNAR", "MCAR"):
            a = agg.get((modeler, init, arm))
            for m in ("hd", "success", "kl_hat_alpha", "kl_hat_p"):
                row[f"{m}_{arm}"] = a[m] if a else float("nan")
            row[f"n_failed_{arm}"] = a["n_failed"] if a else 0
        rows.append(row)
    return rows


SUMMARY_FIELDS = ("modeler", "init", "hd_MNAR", "hd_MCAR", "success_MNAR", "success_MCAR",
                  "kl_hat_alpha_MNAR", "kl_hat_alpha_MCAR", "kl_hat_p_MNAR", "kl_hat_p_MCAR",
                  "n_failed_MNAR", "n_failed_MCAR")


def emit_report(report: AttackReport, out_dir, formats=("records", "summary", "long")) -> list:
    """Write per-replicate records, the summary table and long-format plot data.

    Output is a pure function of the report, so re-emitting is byte-identical.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "records" in formats:
        path = out / "records.csv"
        path.write_text(_csv_text(report.records, RECORD_FIELDS), encoding="utf-8")
        written.append(path)
    if "summary" in formats:
        path = out / "summary.csv"
        path.write_text(_csv_text(summary_table(report), SUMMARY_FIELDS), encoding="utf-8")
        written.append(path)
    if "long" in formats:
        rows = []
        for rec in report.records:
            if rec["status"] != "ok":
                continue
            for m in METRICS:
                rows.append({"metric": m, "modeler": rec["modeler"], "init": rec["init"],
                             "mechanism": rec["arm"], "replicate": rec["replicate"],
                             "value": rec[m]})
        path = out / "long.csv"
        path.write_text(_csv_text(rows, ("metric", "modeler", "init", "mechanism",
                                         "replicate", "value")), encoding="utf-8")
        written.append(path)
    meta = {k: v for k, v in report.meta.items()}
    path = out / "meta.json"
    path.write_text(json.dumps(meta, indent=2, sort_keys=True, default=_json_default) + "\n",
                    encoding="utf-8")
    written.append(path)
    return written


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(type(o).__name__)


def load_records(path) -> AttackReport:
    """Read ``records.csv`` back into a report (for the ``report`` command)."""
    text = Path(path).read_text(encoding="utf-8")
    rows = list(csv.DictReader(io.StringIO(text)))
    records = []
    for row in rows:
        rec = dict(row)
        rec["replicate"] = int(rec["replicate"])
        for m in METRICS:
            rec[m] = float(rec[m]) if rec[m] not in ("", None) else float("nan")
        rec["n_iter"] = int(rec["n_iter"]) if rec["n_iter"] else None
        rec["reversed"] = int(rec["reversed"]) if rec.get("reversed") else None
        records.append(rec)
    name = records[0]["experiment"] if records else ""
    return AttackReport(name, records, {})
